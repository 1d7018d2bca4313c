use std::path::Path;

use anyhow::Result;
use clap::Args;
use serde::Serialize;

use sceq::grid::SpaceTimeGrid;
use sceq::model::{check_assumption_grid, check_remark_example, documented_mutations, AssumptionReport, ExampleParams};

use crate::manifest::{ensure_dir, write_json, InstanceArgs, RunManifest};
use crate::Status;

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    /// Also apply the documented single-parameter mutations and list the
    /// inequalities each one breaks.
    #[arg(long)]
    pub mutations: bool,
}

#[derive(Serialize)]
struct MutationResult {
    name: &'static str,
    description: &'static str,
    expected: &'static str,
    failing: Vec<String>,
    named: bool,
}

#[derive(Serialize)]
struct CheckOutput<'a> {
    manifest: &'a RunManifest,
    /// `None` when the instance is outside the exponential example family.
    example: Option<AssumptionReport>,
    grid: AssumptionReport,
    mutations: Vec<MutationResult>,
    pass: bool,
}

pub fn run(args: &CheckArgs, out: &Path) -> Result<Status> {
    let loaded = args.instance.load()?;
    let inst = loaded.instance();
    let manifest = RunManifest::new("check", &args.instance, &loaded, args.mutations, None, out);

    let example = match ExampleParams::from_instance(inst) {
        Ok(p) => Some(check_remark_example(&p)?),
        Err(e) => {
            println!("closed-form example checks skipped: {e}");
            None
        }
    };
    if let Some(r) = &example {
        println!("closed-form example inequalities ({} of {} pass)", r.items.iter().filter(|i| i.pass).count(), r.items.len());
        print!("{}", r.table());
    }

    let g = loaded.grid;
    let probe = SpaceTimeGrid::new(g.x_min, g.x_max, g.nx, g.horizon, g.nt, 2)?;
    let grid = check_assumption_grid(inst, &probe);
    println!(
        "\nnodewise inequalities on the {}×{} probe grid ({} of {} pass)",
        probe.nx,
        probe.nt,
        grid.items.iter().filter(|i| i.pass).count(),
        grid.items.len()
    );
    print!("{}", grid.table());

    let mut mutations = Vec::new();
    if args.mutations {
        println!("\nmutations");
        for m in documented_mutations() {
            let failing = m.failures(inst)?;
            let named = failing.iter().any(|n| n == m.expected);
            println!("  {:<24} {:<36} names \"{}\": {}", m.name, m.description, m.expected, if named { "yes" } else { "NO" });
            mutations.push(MutationResult { name: m.name, description: m.description, expected: m.expected, failing, named });
        }
    }

    let pass = example.as_ref().map_or(true, |r| r.all_pass()) && grid.all_pass() && mutations.iter().all(|m| m.named);
    ensure_dir(out)?;
    write_json(&out.join("check.json"), &CheckOutput { manifest: &manifest, example, grid, mutations, pass })?;
    Ok(if pass { Status::Ok } else { Status::Failed })
}
