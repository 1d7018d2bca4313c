use std::path::Path;

use anyhow::Result;
use clap::Args;
use serde::Serialize;

use sceq::equilibrium::{exponential_oracle, OracleReport};
use sceq::model::Discount;

use crate::manifest::{ensure_dir, write_json, ConfigError, InstanceArgs, RunManifest};
use crate::Status;

#[derive(Debug, Args)]
pub struct OracleArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    /// Exponential rate replacing the instance's discount.
    #[arg(long)]
    pub gamma: f64,
    /// Repeat on the refined grid and report the E₁ ratio.
    #[arg(long)]
    pub refine: bool,
}

#[derive(Serialize)]
struct OracleOutput<'a> {
    manifest: &'a RunManifest,
    base: OracleReport,
    refined: Option<OracleReport>,
    e1_ratio: Option<f64>,
}

fn print(label: &str, r: &OracleReport) {
    println!(
        "{label}: E1 = {:.4e}  E2 = {:.4e}  gradient gap = {:.4e}  standalone-w gap = {:.4e}  ({} sweeps, converged {})",
        r.e1, r.e2, r.e_gradient, r.e_literal, r.iterations, r.converged
    );
}

pub fn run(args: &OracleArgs, out: &Path) -> Result<Status> {
    if args.instance.discount.is_some() {
        return Err(ConfigError("--discount conflicts with --gamma for the oracle".into()).into());
    }
    let loaded = args.instance.load()?;
    let inst = loaded.instance().with_discount(Discount::Exponential { gamma: args.gamma });
    inst.validate().map_err(|e| ConfigError(format!("--gamma: {e}")))?;
    let manifest = RunManifest::new("oracle", &args.instance, &loaded, (&loaded.options, args.gamma, args.refine), None, out);
    let (_, base) = exponential_oracle(&inst, &loaded.grid, &loaded.options)?;
    print("base", &base);
    let refined = if args.refine {
        let (_, r) = exponential_oracle(&inst, &loaded.grid.refined(), &loaded.options)?;
        print("refined", &r);
        Some(r)
    } else {
        None
    };
    let e1_ratio = refined.as_ref().map(|r| base.e1 / r.e1);
    if let Some(q) = e1_ratio {
        println!("E1 refinement ratio {q:.3}");
    }
    let converged = base.converged && refined.as_ref().map_or(true, |r| r.converged);
    ensure_dir(out)?;
    write_json(&out.join("oracle.json"), &OracleOutput { manifest: &manifest, base, refined, e1_ratio })?;
    Ok(if converged { Status::Ok } else { Status::Failed })
}
