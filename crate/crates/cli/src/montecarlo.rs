//! `mc` and `perturb`: Monte-Carlo evaluation of the computed law.

use std::io::Write;
use std::path::Path;

use anyhow::Result;
use clap::{Args, ValueEnum};
use serde::Serialize;

use sceq::equilibrium::{solve_equilibrium, EquilibriumSolution};
use sceq::grid::SpaceTimeGrid;
use sceq::model::ProblemInstance;
use sceq::simulate::*;

use crate::manifest::{ensure_dir, write_json, write_with, ConfigError, InstanceArgs, Loaded, RunManifest};
use crate::Status;

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReflectionArg {
    Projection,
    Bridge,
}

/// Path-simulation settings shared by `mc` and `perturb`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct PathArgs {
    /// Start state.
    #[arg(long, allow_hyphen_values = true)]
    pub x0: f64,
    /// Start time.
    #[arg(long, default_value_t = 0.0)]
    pub t0: f64,
    /// Number of paths.
    #[arg(long, default_value_t = 100_000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Euler steps over [0, T]; Δt = T / steps.
    #[arg(long, default_value_t = 2000)]
    pub steps: usize,
    #[arg(long, value_enum, default_value = "bridge")]
    pub reflection: ReflectionArg,
    /// Plain sampling instead of antithetic pairs.
    #[arg(long)]
    pub no_antithetic: bool,
    /// Also run at Δt/2 on common noise and report the bias allowance.
    #[arg(long)]
    pub halving: bool,
}

impl PathArgs {
    fn config(&self, horizon: f64) -> Result<PathConfig> {
        if self.steps == 0 {
            return Err(ConfigError("--steps must be positive".into()).into());
        }
        Ok(PathConfig {
            x0: self.x0,
            t0: self.t0,
            paths: self.n,
            dt: horizon / self.steps as f64,
            seed: self.seed,
            antithetic: !self.no_antithetic,
            reflection: match self.reflection {
                ReflectionArg::Projection => Reflection::Projection,
                ReflectionArg::Bridge => Reflection::BridgeMaximum,
            },
        })
    }
}

#[derive(Debug, Args)]
pub struct McArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    #[command(flatten)]
    pub paths: PathArgs,
    /// Evaluate the family member f^s instead of the objective (s ≤ t0, on
    /// an s-grid node).
    #[arg(long)]
    pub s: Option<f64>,
    /// Write the first K paths to paths.csv.
    #[arg(long, default_value_t = 0)]
    pub trace: usize,
}

fn solve_law(loaded: &Loaded) -> Result<EquilibriumSolution> {
    let sol = solve_equilibrium(loaded.instance(), &loaded.grid, &loaded.options)?;
    if !sol.converged {
        eprintln!("warning: equilibrium iteration did not converge; simulating the last iterate");
    }
    Ok(sol)
}

/// V(x, t) from the solve; above x_max the purchase extension
/// V(x_max) + c(t)(x − x_max).
fn pde_value(sol: &EquilibriumSolution, inst: &ProblemInstance, x: f64, t: f64) -> Result<f64> {
    let x_max = sol.value.grid.x_max;
    let z = x.min(x_max);
    Ok(sol.value.interp2(z, t)? + inst.cost.value(t) * (x - z))
}

fn family_value(sol: &EquilibriumSolution, inst: &ProblemInstance, x: f64, t: f64, s: f64) -> Result<f64> {
    let g: SpaceTimeGrid = sol.family.grid;
    let k = (0..g.ns)
        .find(|&k| (g.s(k) - s).abs() <= 1e-9 * (1.0 + g.horizon))
        .ok_or_else(|| ConfigError(format!("--s {s} is not an s-grid node (Δs = {})", g.ds())))?;
    let x_max = g.x_max;
    let z = x.min(x_max);
    let slope = inst.discount.value((t - s).max(0.0)) * inst.cost.value(t);
    Ok(sol.family.interp_slice(k, z, t)? + slope * (x - z))
}

#[derive(Serialize)]
struct McOutput<'a> {
    manifest: &'a RunManifest,
    target: &'static str,
    report: McReport,
    pde_value: f64,
    refined: Option<RefinedSummary>,
}

#[derive(Serialize)]
struct RefinedSummary {
    fine: McReport,
    shift: f64,
    shift_se: f64,
    bias_allowance: f64,
}

pub fn run_mc(args: &McArgs, out: &Path) -> Result<Status> {
    let loaded = args.instance.load()?;
    let inst = loaded.instance();
    let cfg = args.paths.config(inst.horizon)?;
    let manifest = RunManifest::new("mc", &args.instance, &loaded, (&args.paths, args.s, args.trace), Some(cfg.seed), out);
    let sol = solve_law(&loaded)?;
    let (target, pde, report, refined) = match args.s {
        Some(s) => {
            let pde = family_value(&sol, inst, cfg.x0, cfg.t0, s)?;
            if args.paths.halving {
                return Err(ConfigError("--halving is available for the objective only".into()).into());
            }
            let rep = simulate_family_point(inst, &sol.gamma, &cfg, s)?.with_comparison(pde);
            ("family", pde, rep, None)
        }
        None => {
            let pde = pde_value(&sol, inst, cfg.x0, cfg.t0)?;
            if args.paths.halving {
                let r = simulate_objective_refined(inst, &sol.gamma, &cfg)?;
                let summary = RefinedSummary {
                    fine: r.fine.clone(),
                    shift: r.shift,
                    shift_se: r.shift_se,
                    bias_allowance: r.bias_allowance(),
                };
                ("objective", pde, r.coarse.clone().with_comparison(pde), Some(summary))
            } else {
                ("objective", pde, simulate_objective(inst, &sol.gamma, &cfg)?.with_comparison(pde), None)
            }
        }
    };
    ensure_dir(out)?;
    println!(
        "Ĵ = {:.6} ± {:.2e} ({} paths, seed {}); PDE value {:.6}; z = {:+.2}",
        report.estimate,
        report.std_error,
        report.paths,
        cfg.seed,
        pde,
        report.z_score.unwrap_or(f64::NAN)
    );
    if let Some(r) = &refined {
        println!("Δt-halving shift {:+.3e} ± {:.1e}; bias allowance {:.3e}", r.shift, r.shift_se, r.bias_allowance);
    }
    write_json(&out.join("mc.json"), &McOutput { manifest: &manifest, target, report, pde_value: pde, refined })?;
    if args.trace > 0 {
        let traces = trace_paths(inst, &sol.gamma, &cfg, args.trace)?;
        write_with(&out.join("paths.csv"), |w| {
            writeln!(w, "path,t,x,xi,bound")?;
            for (p, tr) in traces.iter().enumerate() {
                for j in 0..tr.t.len() {
                    writeln!(w, "{p},{},{},{},{}", tr.t[j], tr.x[j], tr.xi[j], tr.bound[j])?;
                }
            }
            Ok(())
        })?;
    }
    Ok(Status::Ok)
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModeArg {
    NoPurchase,
    ExtraJump,
    Both,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[command(flatten)]
    pub instance: InstanceArgs,
    #[command(flatten)]
    pub paths: PathArgs,
    /// Perturbation windows.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.02, 0.01, 0.005])]
    pub h: Vec<f64>,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: ModeArg,
    /// Size of the extra purchase.
    #[arg(long, default_value_t = 0.05)]
    pub delta: f64,
}

#[derive(Serialize)]
struct PerturbRow {
    h: f64,
    mode: Perturbation,
    delta_hat: f64,
    std_error: f64,
    bias_allowance: Option<f64>,
    floor: f64,
    pass: bool,
}

#[derive(Serialize)]
struct PerturbOutput<'a> {
    manifest: &'a RunManifest,
    rows: Vec<PerturbRow>,
    pass: bool,
}

pub fn run_perturb(args: &PerturbArgs, out: &Path) -> Result<Status> {
    let loaded = args.instance.load()?;
    let inst = loaded.instance();
    let cfg = args.paths.config(inst.horizon)?;
    let manifest = RunManifest::new(
        "perturb",
        &args.instance,
        &loaded,
        (&args.paths, &args.h, args.mode, args.delta),
        Some(cfg.seed),
        out,
    );
    let modes: Vec<Perturbation> = match args.mode {
        ModeArg::NoPurchase => vec![Perturbation::NoPurchase],
        ModeArg::ExtraJump => vec![Perturbation::ExtraJump { delta: args.delta }],
        ModeArg::Both => vec![Perturbation::NoPurchase, Perturbation::ExtraJump { delta: args.delta }],
    };
    let cases: Vec<(f64, Perturbation)> = args.h.iter().flat_map(|&h| modes.iter().map(move |&m| (h, m))).collect();
    let sol = solve_law(&loaded)?;
    let row = |p: &PerturbationReport, allowance: Option<f64>| {
        let floor = -(3.0 * p.std_error + allowance.unwrap_or(0.0) + p.rounding_allowance());
        PerturbRow {
            h: p.h,
            mode: p.mode,
            delta_hat: p.delta_hat,
            std_error: p.std_error,
            bias_allowance: allowance,
            floor,
            pass: p.delta_hat >= floor,
        }
    };
    let rows: Vec<PerturbRow> = if args.paths.halving {
        perturbation_sweep_refined(inst, &sol.gamma, &cfg, &cases)?
            .iter()
            .map(|r| row(&r.coarse, Some(r.bias_allowance())))
            .collect()
    } else {
        perturbation_sweep(inst, &sol.gamma, &cfg, &cases)?.iter().map(|p| row(p, None)).collect()
    };
    println!("{:>7} {:<22} {:>13} {:>10} {:>13}  result", "h", "mode", "Δ̂", "SE", "floor");
    for r in &rows {
        let mode = match r.mode {
            Perturbation::NoPurchase => "no-purchase".to_string(),
            Perturbation::ExtraJump { delta } => format!("extra-jump δ={delta}"),
            Perturbation::Law => "law".to_string(),
        };
        println!(
            "{:>7} {:<22} {:>+13.5e} {:>10.3e} {:>+13.5e}  {}",
            r.h,
            mode,
            r.delta_hat,
            r.std_error,
            r.floor,
            if r.pass { "ok" } else { "FAIL" }
        );
    }
    let pass = rows.iter().all(|r| r.pass);
    ensure_dir(out)?;
    write_json(&out.join("perturb.json"), &PerturbOutput { manifest: &manifest, rows, pass })?;
    Ok(if pass { Status::Ok } else { Status::Failed })
}
