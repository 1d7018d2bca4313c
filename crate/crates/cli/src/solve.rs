use std::path::Path;

use anyhow::Result;
use clap::Args;
use serde::Serialize;

use sceq::equilibrium::{
    invariant_report, oracle_gaps, solve_equilibrium, verify_solution, EquilibriumSolution, InvariantReport,
    IterationRecord, OracleReport, ResidualReport,
};
use sceq::obstacle::ObstacleStats;

use crate::manifest::{ensure_dir, write_json, write_with, InstanceArgs, RunManifest};
use crate::Status;

#[derive(Debug, Args)]
pub struct SolveArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
}

pub const ARTIFACTS: [&str; 6] = ["v.csv", "V.csv", "gamma.csv", "d.csv", "d_x.csv", "f_family.csv"];

#[derive(Serialize)]
struct BoundarySummary {
    truncated_rows: usize,
    max_jump: f64,
    at_t0: f64,
}

#[derive(Serialize)]
struct SolveReport<'a> {
    manifest: &'a RunManifest,
    status: &'static str,
    error: Option<String>,
    converged: bool,
    oscillating: bool,
    iterations: usize,
    warnings: &'a [String],
    trace: &'a [IterationRecord],
    residuals: Option<ResidualReport>,
    invariants: Option<InvariantReport>,
    obstacle: Option<ObstacleStats>,
    boundary_tolerance: Option<f64>,
    boundary: Option<BoundarySummary>,
    oracle: Option<OracleReport>,
    artifacts: Vec<&'static str>,
}

/// Upper-invariant slack above c: ten boundary tolerances.
pub fn upper_slack(boundary_tolerance: f64) -> f64 {
    10.0 * boundary_tolerance
}

pub fn run(args: &SolveArgs, out: &Path) -> Result<Status> {
    let loaded = args.instance.load()?;
    let manifest = RunManifest::new("solve", &args.instance, &loaded, &loaded.options, None, out);
    ensure_dir(out)?;
    let inst = loaded.instance();
    let sol = match solve_equilibrium(inst, &loaded.grid, &loaded.options) {
        Ok(sol) => sol,
        Err(e) => {
            let report = SolveReport {
                manifest: &manifest,
                status: "error",
                error: Some(e.to_string()),
                converged: false,
                oscillating: false,
                iterations: 0,
                warnings: &[],
                trace: &[],
                residuals: None,
                invariants: None,
                obstacle: None,
                boundary_tolerance: None,
                boundary: None,
                oracle: None,
                artifacts: vec![],
            };
            write_json(&out.join("report.json"), &report)?;
            return Err(e.into());
        }
    };
    write_fields(&sol, out)?;
    let residuals = verify_solution(&sol, inst)?;
    let tol = sol.boundary_tolerance();
    let invariants = invariant_report(&sol.v, inst, upper_slack(tol))?;
    let oracle = match inst.discount.exponential_rate() {
        Some(_) => Some(oracle_gaps(&sol, inst)?),
        None => None,
    };
    let report = SolveReport {
        manifest: &manifest,
        status: if sol.converged { "converged" } else { "not-converged" },
        error: None,
        converged: sol.converged,
        oscillating: sol.oscillating,
        iterations: sol.iterations,
        warnings: &sol.warnings,
        trace: &sol.trace,
        residuals: Some(residuals.clone()),
        invariants: Some(invariants),
        obstacle: Some(sol.obstacle_stats.clone()),
        boundary_tolerance: Some(tol),
        boundary: Some(BoundarySummary {
            truncated_rows: sol.gamma.truncated_rows.len(),
            max_jump: sol.gamma.max_jump(),
            at_t0: sol.gamma.at_forward(0.0),
        }),
        oracle,
        artifacts: ARTIFACTS.to_vec(),
    };
    write_json(&out.join("report.json"), &report)?;
    write_trace_csv(&sol.trace, out)?;

    println!(
        "{} after {} sweeps; complementarity sup {:.3e}; Γ(0) = {:.4}",
        report.status,
        sol.iterations,
        residuals.hjb_tolerance(),
        sol.gamma.at_forward(0.0)
    );
    for w in &sol.warnings {
        println!("warning: {w}");
    }
    println!("artifacts written to {}", out.display());
    Ok(if sol.converged { Status::Ok } else { Status::Failed })
}

fn write_fields(sol: &EquilibriumSolution, out: &Path) -> Result<()> {
    write_with(&out.join("v.csv"), |w| sol.v.write_csv(w))?;
    write_with(&out.join("V.csv"), |w| sol.value.write_csv(w))?;
    write_with(&out.join("gamma.csv"), |w| sol.gamma.write_csv(w))?;
    write_with(&out.join("d.csv"), |w| sol.d.write_csv(w))?;
    write_with(&out.join("d_x.csv"), |w| sol.d_x.write_csv(w))?;
    write_with(&out.join("f_family.csv"), |w| sol.family.write_csv(w))?;
    Ok(())
}

fn write_trace_csv(trace: &[IterationRecord], out: &Path) -> Result<()> {
    use std::io::Write;
    write_with(&out.join("trace.csv"), |w| {
        writeln!(
            w,
            "iteration,delta_v,delta_d,delta_gamma,newton_iterations,gradient_lower,gradient_upper,curvature_lower,curvature_upper"
        )?;
        for r in trace {
            let b = &r.bands;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{}",
                r.iteration,
                r.delta_v,
                r.delta_d,
                r.delta_gamma,
                r.newton_iterations,
                b.gradient_lower,
                b.gradient_upper,
                b.curvature_lower,
                b.curvature_upper
            )?;
        }
        Ok(())
    })
}
