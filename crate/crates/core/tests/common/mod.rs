#![allow(dead_code)]

use sceq::grid::SpaceTimeGrid;
use sceq::model::{InstanceFile, ProblemInstance};

pub const CANONICAL: &str = include_str!("../../../../instances/remark52.cfg");

pub fn canonical_file() -> InstanceFile {
    InstanceFile::parse(CANONICAL).expect("canonical instance parses")
}

pub fn canonical() -> (ProblemInstance, SpaceTimeGrid) {
    let f = canonical_file();
    let g = f.grid;
    let grid = SpaceTimeGrid::new(g.x_min, g.x_max, g.nx, f.instance.horizon, g.nt, g.ns).unwrap();
    (f.instance, grid)
}

/// Canonical instance on a coarser grid for quick structural tests.
pub fn canonical_coarse() -> (ProblemInstance, SpaceTimeGrid) {
    let (inst, g) = canonical();
    let grid = SpaceTimeGrid::new(g.x_min, g.x_max, 181, inst.horizon, 41, 41).unwrap();
    (inst, grid)
}
