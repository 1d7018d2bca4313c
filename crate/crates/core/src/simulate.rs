//! Monte-Carlo evaluation of the objective under the singular control
//! generated by a boundary Γ: Euler–Maruyama for the state, reflection at
//! Γ_fwd(t) = Γ(T − t), the optimal terminal purchase at T.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::FreeBoundary;
use crate::model::{effective_terminal, EffectiveTerminal, ProblemInstance};

/// How overshoot past the boundary is turned into control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Reflection {
    /// Project the Euler endpoint back onto the boundary.
    Projection,
    /// Regulate by the Brownian-bridge maximum of the step: the one-step
    /// Skorohod map, which also catches crossings between grid times.
    #[default]
    BridgeMaximum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathConfig {
    pub x0: f64,
    pub t0: f64,
    pub paths: usize,
    pub dt: f64,
    pub seed: u64,
    pub antithetic: bool,
    #[serde(default)]
    pub reflection: Reflection,
}

impl PathConfig {
    fn validate(&self, horizon: f64) -> Result<()> {
        if self.paths == 0 {
            return Err(Error::Input("path count must be positive".into()));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Input("Monte-Carlo step must be positive".into()));
        }
        if !(0.0..=horizon).contains(&self.t0) || !self.x0.is_finite() {
            return Err(Error::Range { what: "t0", value: self.t0, lo: 0.0, hi: horizon });
        }
        Ok(())
    }

    fn steps(&self, horizon: f64) -> usize {
        (((horizon - self.t0) / self.dt).round() as usize).max(1)
    }

    /// Same configuration with the step halved.
    pub fn halved(&self) -> Self {
        PathConfig { dt: 0.5 * self.dt, ..*self }
    }

    /// Number of independent noise streams (antithetic pairs share one).
    fn streams(&self) -> usize {
        if self.antithetic {
            self.paths.div_ceil(2)
        } else {
            self.paths
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct McReport {
    pub estimate: f64,
    pub std_error: f64,
    pub paths: usize,
    pub running: f64,
    pub terminal: f64,
    pub cost: f64,
    pub comparison: Option<f64>,
    pub z_score: Option<f64>,
}

impl McReport {
    pub fn with_comparison(mut self, value: f64) -> Self {
        self.comparison = Some(value);
        self.z_score = Some(if self.std_error > 0.0 {
            (self.estimate - value) / self.std_error
        } else if self.estimate == value {
            0.0
        } else {
            f64::INFINITY
        });
        self
    }
}

/// Control applied on [t₀, t₀ + h) before the law takes over. The right
/// edge of the window keeps binding: the truncated problem has no states
/// above x_max, so no arm may use them.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Perturbation {
    /// No purchases at all on the window.
    NoPurchase,
    /// A purchase of size δ at t₀, nothing else on the window.
    ExtraJump { delta: f64 },
    /// The law's own action (the null perturbation).
    Law,
}

/// Per-path components (running, cost, terminal).
#[derive(Debug, Clone, Copy, Default)]
struct PathCost {
    running: f64,
    cost: f64,
    terminal: f64,
}

impl PathCost {
    fn total(&self) -> f64 {
        self.running + self.cost + self.terminal
    }
}

/// Precomputed per-step quantities along the time grid of a run.
struct Schedule {
    t0: f64,
    dt: f64,
    steps: usize,
    /// β(t_j − s), j = 0..=steps.
    beta: Vec<f64>,
    /// c(t_j).
    cost: Vec<f64>,
    /// Γ_fwd(t_j) for t_j < T.
    bound: Vec<f64>,
    /// Right edge of the solved window: a state constraint that binds in
    /// every arm, perturbed or not.
    edge: f64,
}

fn schedule(instance: &ProblemInstance, gamma: &FreeBoundary, cfg: &PathConfig, s: f64) -> Result<Schedule> {
    let t_end = instance.horizon;
    let steps = cfg.steps(t_end);
    let dt = (t_end - cfg.t0) / steps as f64;
    let g = gamma.grid;
    if (g.horizon - t_end).abs() > 1e-12 * t_end {
        return Err(Error::Contract("boundary and instance horizons differ".into()));
    }
    let tau1 = g.t(1);
    let mut beta = Vec::with_capacity(steps + 1);
    let mut cost = Vec::with_capacity(steps + 1);
    let mut bound = Vec::with_capacity(steps + 1);
    for j in 0..=steps {
        let t = if j == steps { t_end } else { cfg.t0 + j as f64 * dt };
        beta.push(instance.discount.value((t - s).max(0.0)));
        cost.push(instance.cost.value(t));
        // Γ at τ = 0 is the terminal kink; the law on t < T uses τ ≥ Δτ.
        let tau = (t_end - t).max(tau1);
        let b = gamma.at_reversed(tau);
        if !b.is_finite() {
            return Err(Error::Contract(format!("boundary undefined at t = {t}")));
        }
        bound.push(b);
    }
    Ok(Schedule { t0: cfg.t0, dt, steps, beta, cost, bound, edge: g.x_max })
}

/// Fixed-size draws per step: two uniforms for a Box–Muller normal and one
/// for the bridge maximum. Equal consumption keeps all arms on the same
/// noise at equal step indices.
fn draw(rng: &mut ChaCha8Rng) -> (f64, f64) {
    let u1: f64 = rng.gen();
    let u2: f64 = rng.gen();
    let u3: f64 = rng.gen();
    let r = (-2.0 * (1.0 - u1).ln()).sqrt();
    (r * (std::f64::consts::TAU * u2).cos(), 1.0 - u3)
}

/// Noise for one step made of `sub` finer steps: the scaled sum of their
/// normals and the bridge uniform of the first. With `sub = 2` a run at Δt
/// sees exactly the Brownian path of the run at Δt/2 on the same stream.
fn draw_step(rng: &mut ChaCha8Rng, sub: usize) -> (f64, f64) {
    let (mut z, u) = draw(rng);
    for _ in 1..sub {
        z += draw(rng).0;
    }
    (z / (sub as f64).sqrt(), u)
}

struct Simulator<'a> {
    instance: &'a ProblemInstance,
    terminal: EffectiveTerminal,
    sched: Schedule,
    reflection: Reflection,
}

impl Simulator<'_> {
    /// One path; `sign` flips the normals for the antithetic partner and
    /// `free_until` is the step index before which the perturbation acts.
    fn path(&self, rng: &mut ChaCha8Rng, sign: f64, x0: f64, pert: Perturbation, free_until: usize, sub: usize) -> PathCost {
        let inst = self.instance;
        let sc = &self.sched;
        let mut pc = PathCost::default();
        let mut x = x0;
        let acting = |j: usize| free_until == 0 || j >= free_until || matches!(pert, Perturbation::Law);
        match pert {
            Perturbation::ExtraJump { delta } if free_until > 0 => {
                pc.cost += sc.beta[0] * sc.cost[0] * delta;
                x -= delta;
            }
            _ => {}
        }
        let barrier = |j: usize| if acting(j) { sc.bound[j] } else { sc.edge };
        if x > barrier(0) {
            pc.cost += sc.beta[0] * sc.cost[0] * (x - barrier(0));
            x = barrier(0);
        }
        let sqdt = sc.dt.sqrt();
        for j in 0..sc.steps {
            let t = sc.t0 + j as f64 * sc.dt;
            pc.running += sc.beta[j] * inst.running_loss.value(x, t) * sc.dt;
            let (z, u) = draw_step(rng, sub);
            let sig = inst.volatility.value(x, t);
            let inc = inst.drift.value(x, t) * sc.dt + sig * sqdt * sign * z;
            let mut next = x + inc;
            let j1 = j + 1;
            // The purchase at T itself is inside F̃.
            if j1 < sc.steps {
                let b = barrier(j1);
                let push = match self.reflection {
                    Reflection::Projection => next - b,
                    Reflection::BridgeMaximum => {
                        let var = sig * sig * sc.dt;
                        let peak = 0.5 * (x + next + ((next - x).powi(2) - 2.0 * var * u.ln()).sqrt());
                        peak - b
                    }
                };
                if push > 0.0 {
                    pc.cost += sc.beta[j1] * sc.cost[j1] * push;
                    next -= push;
                }
            }
            x = next;
        }
        pc.terminal = sc.beta[sc.steps] * self.terminal.value(x);
        pc
    }
}

fn simulator<'a>(
    instance: &'a ProblemInstance,
    gamma: &FreeBoundary,
    cfg: &PathConfig,
    s: f64,
) -> Result<Simulator<'a>> {
    instance.validate()?;
    cfg.validate(instance.horizon)?;
    Ok(Simulator {
        instance,
        terminal: effective_terminal(instance)?,
        sched: schedule(instance, gamma, cfg, s)?,
        reflection: cfg.reflection,
    })
}

fn stream_rng(seed: u64, stream: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Costs of every stream (antithetic pairs averaged), in stream order.
fn run_streams(sim: &Simulator, cfg: &PathConfig, pert: Perturbation, free_until: usize, sub: usize) -> Vec<PathCost> {
    (0..cfg.streams())
        .into_par_iter()
        .map(|k| {
            let mut rng = stream_rng(cfg.seed, k);
            let a = sim.path(&mut rng, 1.0, cfg.x0, pert, free_until, sub);
            if cfg.antithetic {
                let mut rng = stream_rng(cfg.seed, k);
                let b = sim.path(&mut rng, -1.0, cfg.x0, pert, free_until, sub);
                PathCost {
                    running: 0.5 * (a.running + b.running),
                    cost: 0.5 * (a.cost + b.cost),
                    terminal: 0.5 * (a.terminal + b.terminal),
                }
            } else {
                a
            }
        })
        .collect()
}

/// Pairwise (cascade) summation; order-fixed, so results do not depend on
/// the thread count.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Mean and standard error of the mean.
pub fn mean_and_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = pairwise_sum(v) / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let dev: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
    let var = pairwise_sum(&dev) / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn report(costs: &[PathCost], paths: usize) -> McReport {
    let totals: Vec<f64> = costs.iter().map(PathCost::total).collect();
    let (estimate, std_error) = mean_and_se(&totals);
    let n = costs.len() as f64;
    let comp = |f: fn(&PathCost) -> f64| pairwise_sum(&costs.iter().map(f).collect::<Vec<_>>()) / n;
    McReport {
        estimate,
        std_error,
        paths,
        running: comp(|p| p.running),
        terminal: comp(|p| p.terminal),
        cost: comp(|p| p.cost),
        comparison: None,
        z_score: None,
    }
}

/// Ĵ(x₀, t₀) under the law generated by Γ, discounting from t₀.
pub fn simulate_objective(instance: &ProblemInstance, gamma: &FreeBoundary, cfg: &PathConfig) -> Result<McReport> {
    simulate_family_point(instance, gamma, cfg, cfg.t0)
}

/// Same paths, discounting from an earlier s: estimates f^s(x₀, t₀).
pub fn simulate_family_point(
    instance: &ProblemInstance,
    gamma: &FreeBoundary,
    cfg: &PathConfig,
    s: f64,
) -> Result<McReport> {
    if s > cfg.t0 + 1e-12 || s < 0.0 {
        return Err(Error::Contract(format!("discount reference s = {s} must lie in [0, t0 = {}]", cfg.t0)));
    }
    let sim = simulator(instance, gamma, cfg, s)?;
    let costs = run_streams(&sim, cfg, Perturbation::Law, 0, 1);
    Ok(report(&costs, cfg.paths))
}

/// Estimates at Δt and Δt/2 driven by the same Brownian paths: the coarse
/// run sums pairs of the fine run's increments, so their difference
/// measures the time-discretisation bias without Monte Carlo noise between
/// two independent runs.
#[derive(Debug, Clone, Serialize)]
pub struct RefinedEstimate {
    pub coarse: McReport,
    pub fine: McReport,
    /// Mean of the pathwise differences fine − coarse.
    pub shift: f64,
    pub shift_se: f64,
}

impl RefinedEstimate {
    /// Bias allowance for the coarse estimate. A weak-order-one scheme has
    /// bias(Δt) ≈ 2 [Ĵ(Δt) − Ĵ(Δt/2)]; the paired error is added at 3σ.
    pub fn bias_allowance(&self) -> f64 {
        2.0 * self.shift.abs() + 3.0 * self.shift_se
    }
}

/// Configuration whose step is exactly half the realised coarse step.
fn fine_config(instance: &ProblemInstance, cfg: &PathConfig) -> PathConfig {
    let steps = cfg.steps(instance.horizon);
    PathConfig { dt: (instance.horizon - cfg.t0) / (2 * steps) as f64, ..*cfg }
}

/// Ĵ(x₀, t₀) at Δt and Δt/2 on common Brownian paths.
pub fn simulate_objective_refined(
    instance: &ProblemInstance,
    gamma: &FreeBoundary,
    cfg: &PathConfig,
) -> Result<RefinedEstimate> {
    let coarse_sim = simulator(instance, gamma, cfg, cfg.t0)?;
    let fine_cfg = fine_config(instance, cfg);
    let fine_sim = simulator(instance, gamma, &fine_cfg, cfg.t0)?;
    let coarse = run_streams(&coarse_sim, cfg, Perturbation::Law, 0, 2);
    let fine = run_streams(&fine_sim, &fine_cfg, Perturbation::Law, 0, 1);
    let diffs: Vec<f64> = fine.iter().zip(&coarse).map(|(f, c)| f.total() - c.total()).collect();
    let (shift, shift_se) = mean_and_se(&diffs);
    Ok(RefinedEstimate {
        coarse: report(&coarse, cfg.paths),
        fine: report(&fine, cfg.paths),
        shift,
        shift_se,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct PerturbationReport {
    pub h: f64,
    pub mode: Perturbation,
    /// (Ĵ_B − Ĵ_A) / h.
    pub delta_hat: f64,
    /// Standard error of `delta_hat` from the paired differences.
    pub std_error: f64,
    pub arm_a: McReport,
    pub arm_b: McReport,
}

impl PerturbationReport {
    /// Floating-point resolution of Δ̂: arms that differ only in how the
    /// same purchases are summed disagree by a few ulps of Ĵ, divided by h.
    pub fn rounding_allowance(&self) -> f64 {
        16.0 * f64::EPSILON * (self.arm_a.estimate.abs() + self.arm_b.estimate.abs()) / self.h
    }
}

/// Paired comparison of the law (arm A) against the perturbed control
/// (arm B) on common noise.
pub fn perturbation_test(
    instance: &ProblemInstance,
    gamma: &FreeBoundary,
    cfg: &PathConfig,
    h: f64,
    mode: Perturbation,
) -> Result<PerturbationReport> {
    let sim = simulator(instance, gamma, cfg, cfg.t0)?;
    let arm_a = run_streams(&sim, cfg, Perturbation::Law, 0, 1);
    perturbation_against(&sim, cfg, &arm_a, h, mode, 1)
}

/// Several perturbations sharing one arm-A run.
pub fn perturbation_sweep(
    instance: &ProblemInstance,
    gamma: &FreeBoundary,
    cfg: &PathConfig,
    cases: &[(f64, Perturbation)],
) -> Result<Vec<PerturbationReport>> {
    let sim = simulator(instance, gamma, cfg, cfg.t0)?;
    let arm_a = run_streams(&sim, cfg, Perturbation::Law, 0, 1);
    cases
        .iter()
        .map(|&(h, mode)| perturbation_against(&sim, cfg, &arm_a, h, mode, 1))
        .collect()
}

/// A perturbation measured at Δt and Δt/2 on common Brownian paths.
#[derive(Debug, Clone, Serialize)]
pub struct RefinedPerturbation {
    pub coarse: PerturbationReport,
    pub fine: PerturbationReport,
}

impl RefinedPerturbation {
    /// Bias allowance for the coarse Δ̂, as for [`RefinedEstimate`]. The
    /// step-halving shift is estimated with the two standard errors combined.
    pub fn bias_allowance(&self) -> f64 {
        let shift = self.fine.delta_hat - self.coarse.delta_hat;
        2.0 * shift.abs() + 3.0 * self.coarse.std_error.hypot(self.fine.std_error)
    }
}

/// [`perturbation_sweep`] at Δt and at Δt/2 on common Brownian paths.
pub fn perturbation_sweep_refined(
    instance: &ProblemInstance,
    gamma: &FreeBoundary,
    cfg: &PathConfig,
    cases: &[(f64, Perturbation)],
) -> Result<Vec<RefinedPerturbation>> {
    let coarse_sim = simulator(instance, gamma, cfg, cfg.t0)?;
    let fine_cfg = fine_config(instance, cfg);
    let fine_sim = simulator(instance, gamma, &fine_cfg, cfg.t0)?;
    let coarse_a = run_streams(&coarse_sim, cfg, Perturbation::Law, 0, 2);
    let fine_a = run_streams(&fine_sim, &fine_cfg, Perturbation::Law, 0, 1);
    cases
        .iter()
        .map(|&(h, mode)| {
            Ok(RefinedPerturbation {
                coarse: perturbation_against(&coarse_sim, cfg, &coarse_a, h, mode, 2)?,
                fine: perturbation_against(&fine_sim, &fine_cfg, &fine_a, h, mode, 1)?,
            })
        })
        .collect()
}

fn perturbation_against(
    sim: &Simulator,
    cfg: &PathConfig,
    arm_a: &[PathCost],
    h: f64,
    mode: Perturbation,
    sub: usize,
) -> Result<PerturbationReport> {
    let sc = &sim.sched;
    if h < sc.dt {
        return Err(Error::Contract(format!("window h = {h} is shorter than the step {}", sc.dt)));
    }
    if cfg.t0 + h >= sim.instance.horizon {
        return Err(Error::Contract(format!("t0 + h = {} reaches the horizon", cfg.t0 + h)));
    }
    let free_until = (h / sc.dt).round() as usize;
    let arm_b = run_streams(sim, cfg, mode, free_until, sub);
    let diffs: Vec<f64> = arm_b.iter().zip(arm_a).map(|(b, a)| (b.total() - a.total()) / h).collect();
    let (delta_hat, std_error) = mean_and_se(&diffs);
    Ok(PerturbationReport {
        h,
        mode,
        delta_hat,
        std_error,
        arm_a: report(arm_a, cfg.paths),
        arm_b: report(&arm_b, cfg.paths),
    })
}

/// One simulated path with its state, cumulative control and boundary at
/// each step, for debugging and the path-law invariants.
#[derive(Debug, Clone, Serialize)]
pub struct PathTrace {
    pub t: Vec<f64>,
    pub x: Vec<f64>,
    pub xi: Vec<f64>,
    pub bound: Vec<f64>,
}

/// Traces of the first `count` paths of a configuration (law only).
pub fn trace_paths(
    instance: &ProblemInstance,
    gamma: &FreeBoundary,
    cfg: &PathConfig,
    count: usize,
) -> Result<Vec<PathTrace>> {
    let sim = simulator(instance, gamma, cfg, cfg.t0)?;
    let sc = &sim.sched;
    let inst = instance;
    let mut out = Vec::new();
    for k in 0..count.min(cfg.streams()) {
        let mut rng = stream_rng(cfg.seed, k);
        let mut tr = PathTrace { t: vec![], x: vec![], xi: vec![], bound: vec![] };
        let mut x = cfg.x0;
        let mut xi = 0.0;
        if x > sc.bound[0] {
            xi += x - sc.bound[0];
            x = sc.bound[0];
        }
        tr.t.push(sc.t0);
        tr.x.push(x);
        tr.xi.push(xi);
        tr.bound.push(sc.bound[0]);
        for j in 0..sc.steps {
            let t = sc.t0 + j as f64 * sc.dt;
            let (z, u) = draw(&mut rng);
            let sig = inst.volatility.value(x, t);
            let mut next = x + inst.drift.value(x, t) * sc.dt + sig * sc.dt.sqrt() * z;
            let j1 = j + 1;
            if j1 < sc.steps {
                let b = sc.bound[j1];
                let push = match sim.reflection {
                    Reflection::Projection => next - b,
                    Reflection::BridgeMaximum => {
                        let var = sig * sig * sc.dt;
                        let peak = 0.5 * (x + next + ((next - x).powi(2) - 2.0 * var * u.ln()).sqrt());
                        peak - b
                    }
                };
                if push > 0.0 {
                    xi += push;
                    next -= push;
                }
            }
            x = next;
            tr.t.push(if j1 == sc.steps { inst.horizon } else { sc.t0 + j1 as f64 * sc.dt });
            tr.x.push(x);
            tr.xi.push(xi);
            tr.bound.push(if j1 < sc.steps { sc.bound[j1] } else { f64::NAN });
        }
        out.push(tr);
    }
    Ok(out)
}
