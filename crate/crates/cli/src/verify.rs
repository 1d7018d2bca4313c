use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;
use serde_json::Value;

use sceq::equilibrium::{band_margins, bands_hold, invariant_report, verify_residuals, BandMargins, InvariantReport, ResidualReport};
use sceq::grid::{FamilyField, FreeBoundary, ScalarField, SpaceTimeGrid};
use sceq::obstacle::{boundary_tolerance, extract_boundary, ObstacleStats};

use crate::manifest::{ensure_dir, grid_of, write_json, write_with, MissingArtifact, RunManifest};
use crate::solve::{upper_slack, ARTIFACTS};
use crate::Status;

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Solved artifact directories (default: the output directory). Two or
    /// more are read as a refinement sequence.
    pub dirs: Vec<PathBuf>,
    /// Absolute tolerance for the complementarity residuals instead of the
    /// values recorded at solve time.
    #[arg(long)]
    pub tol: Option<f64>,
}

/// Relative slack when comparing recomputed residuals with recorded ones.
const REPRODUCE_RTOL: f64 = 1e-9;
/// Tolerance of the V ↔ v quadrature consistency check.
const QUADRATURE_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
    pub pass: bool,
    /// Hard checks decide the exit code; soft ones are reported only.
    pub hard: bool,
}

#[derive(Debug, Serialize)]
pub struct DirReport {
    pub dir: String,
    pub grid: SpaceTimeGrid,
    pub residuals: ResidualReport,
    pub invariants: InvariantReport,
    pub bands: BandMargins,
    pub checks: Vec<Check>,
    pub pass: bool,
}

fn require(dir: &Path, name: &str) -> Result<PathBuf> {
    let p = dir.join(name);
    if p.is_file() {
        Ok(p)
    } else {
        Err(MissingArtifact(p).into())
    }
}

fn reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}

fn recorded(report: &Value, path: &[&str]) -> Option<f64> {
    path.iter().try_fold(report, |v, k| v.get(k))?.as_f64()
}

pub fn verify_dir(dir: &Path, tol: Option<f64>) -> Result<DirReport> {
    let report_path = require(dir, "report.json")?;
    let paths: Vec<PathBuf> = ARTIFACTS.iter().map(|a| require(dir, a)).collect::<Result<_>>()?;
    let report: Value = serde_json::from_reader(reader(&report_path)?).context("parsing report.json")?;
    let manifest: RunManifest =
        serde_json::from_value(report.get("manifest").cloned().unwrap_or(Value::Null)).context("report.json has no valid manifest")?;
    let inst = &manifest.instance.instance;
    let grid = grid_of(&manifest.instance)?;
    let obstacle: ObstacleStats = serde_json::from_value(report.get("obstacle").cloned().unwrap_or(Value::Null))
        .context("report.json has no obstacle statistics (the solve did not finish)")?;

    let field = |i: usize| -> Result<ScalarField> {
        ScalarField::read_csv(grid, reader(&paths[i])?).with_context(|| format!("reading {}", paths[i].display()))
    };
    let v = field(0)?;
    let value = field(1)?;
    let gamma = FreeBoundary::read_csv(grid, reader(&paths[2])?).context("reading gamma.csv")?;
    let d = field(3)?;
    let d_x = field(4)?;
    let family = FamilyField::read_csv(grid, reader(&paths[5])?).context("reading f_family.csv")?;

    let residuals = verify_residuals(inst, &value, &d, &gamma, Some(&family))?;
    let btol = boundary_tolerance(&obstacle);
    let invariants = invariant_report(&v, inst, upper_slack(btol))?;
    let bands = band_margins(inst, &d, &d_x, &gamma);

    let mut checks = Vec::new();
    let finite = [&v, &value, &d, &d_x].iter().all(|f| f.is_finite()) && family.is_finite();
    checks.push(Check { name: "fields finite".into(), value: if finite { 0.0 } else { 1.0 }, limit: 0.0, pass: finite, hard: true });

    let res_json = serde_json::to_value(&residuals)?;
    for key in [
        "hjb_first_negative",
        "hjb_second_negative",
        "complementarity",
        "family_interior",
        "family_gradient",
        "family_terminal",
        "value_terminal",
    ] {
        let now = recorded(&res_json, &[key, "value"]).unwrap_or(f64::NAN);
        let is_hjb = key.starts_with("hjb") || key == "complementarity";
        let limit = match (tol, is_hjb) {
            (Some(t), true) => t,
            _ => {
                let then = recorded(&report, &["residuals", key, "value"])
                    .with_context(|| format!("report.json lacks residuals.{key}"))?;
                then * (1.0 + REPRODUCE_RTOL) + 1e-12
            }
        };
        checks.push(Check { name: format!("residual {key}"), value: now, limit, pass: now <= limit, hard: true });
    }

    let q = quadrature_gap(&value, &v);
    checks.push(Check { name: "V integrates v".into(), value: q, limit: QUADRATURE_TOL, pass: q <= QUADRATURE_TOL, hard: true });

    checks.push(Check {
        name: "v ≤ c".into(),
        value: 0.0 - invariants.upper,
        limit: 0.0,
        pass: invariants.upper >= 0.0,
        hard: true,
    });

    let regions = extract_boundary(&v.to_reversed(), inst, btol);
    let gap = regions.max_abs_diff(&gamma);
    checks.push(Check { name: "Γ matches v".into(), value: gap, limit: 1e-12, pass: gap <= 1e-12, hard: true });

    let soft = [
        ("v ≥ F̃′", -invariants.lower),
        ("v nondecreasing in x", -invariants.monotone_x),
        ("v nondecreasing in τ", -invariants.monotone_tau),
    ];
    for (name, worst) in soft {
        checks.push(Check { name: name.into(), value: worst, limit: 0.0, pass: worst <= 0.0, hard: false });
    }
    checks.push(Check {
        name: "left tail v ≤ Cκ".into(),
        value: invariants.left_tail_ratio,
        limit: 1.0,
        pass: invariants.left_tail_ratio <= 1.0,
        hard: false,
    });
    checks.push(Check {
        name: "coupling bands".into(),
        value: -bands.gradient_lower.min(bands.gradient_upper).min(bands.curvature_lower).min(bands.curvature_upper),
        limit: 0.0,
        pass: bands_hold(&bands),
        hard: false,
    });

    let pass = checks.iter().filter(|c| c.hard).all(|c| c.pass);
    Ok(DirReport { dir: dir.display().to_string(), grid, residuals, invariants, bands, checks, pass })
}

/// max |(V_{i+1} − V_i)/Δx − (v_i + v_{i+1})/2| / (1 + |v|): V is the
/// trapezoid integral of v in x.
fn quadrature_gap(value: &ScalarField, v: &ScalarField) -> f64 {
    let (value, v) = (value.to_forward(), v.to_forward());
    let g = value.grid;
    let dx = g.dx();
    let mut worst = 0.0f64;
    for n in 0..g.nt {
        let (big, small) = (value.row(n), v.row(n));
        for i in 0..g.nx - 1 {
            let mid = 0.5 * (small[i] + small[i + 1]);
            worst = worst.max(((big[i + 1] - big[i]) / dx - mid).abs() / (1.0 + mid.abs()));
        }
    }
    worst
}

#[derive(Serialize)]
struct RefinementRow {
    dir: String,
    nx: usize,
    nt: usize,
    complementarity: f64,
    hjb_tolerance: f64,
    ratio: Option<f64>,
}

pub fn run(args: &VerifyArgs, out: &Path) -> Result<Status> {
    let dirs = if args.dirs.is_empty() { vec![out.to_path_buf()] } else { args.dirs.clone() };
    let mut reports = Vec::new();
    for dir in &dirs {
        let rep = verify_dir(dir, args.tol)?;
        println!("{}: {}", rep.dir, if rep.pass { "PASS" } else { "FAIL" });
        for c in &rep.checks {
            println!(
                "  {:4} {:5} {:<32} {:+.3e} (limit {:.3e})",
                if c.pass { "ok" } else { "FAIL" },
                if c.hard { "hard" } else { "soft" },
                c.name,
                c.value,
                c.limit
            );
        }
        write_json(&dir.join("verify.json"), &rep)?;
        reports.push(rep);
    }
    if reports.len() > 1 {
        let mut rows = Vec::new();
        let mut prev: Option<f64> = None;
        for r in &reports {
            let t = r.residuals.hjb_tolerance();
            rows.push(RefinementRow {
                dir: r.dir.clone(),
                nx: r.grid.nx,
                nt: r.grid.nt,
                complementarity: r.residuals.complementarity.value,
                hjb_tolerance: t,
                ratio: prev.map(|p| t / p),
            });
            prev = Some(t);
        }
        println!("\nrefinement table (ratio = sup residual / previous level)");
        println!("{:>6} {:>6} {:>14} {:>14} {:>8}  dir", "nx", "nt", "complementarity", "hjb sup", "ratio");
        for r in &rows {
            let ratio = r.ratio.map_or("-".to_string(), |x| format!("{x:.3}"));
            println!("{:>6} {:>6} {:>14.4e} {:>14.4e} {:>8}  {}", r.nx, r.nt, r.complementarity, r.hjb_tolerance, ratio, r.dir);
        }
        ensure_dir(out)?;
        write_with(&out.join("refinement.csv"), |w| {
            writeln!(w, "nx,nt,complementarity,hjb_tolerance,ratio")?;
            for r in &rows {
                let ratio = r.ratio.map_or(String::new(), |x| x.to_string());
                writeln!(w, "{},{},{},{},{}", r.nx, r.nt, r.complementarity, r.hjb_tolerance, ratio)?;
            }
            Ok(())
        })?;
    }
    Ok(if reports.iter().all(|r| r.pass) { Status::Ok } else { Status::Failed })
}
