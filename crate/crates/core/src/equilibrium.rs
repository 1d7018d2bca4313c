//! Fixed-point driver coupling the obstacle problem with the auxiliary
//! family, extended-HJB residual checks and the exponential-discount oracle.

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::coupling::{self, coupling_term, solve_sensitivity_family, solve_value_family, CouplingMode};
use crate::error::{Error, Result};
use crate::grid::{FamilyField, FreeBoundary, ScalarField, SpaceTimeGrid, TimeAxis};
use crate::model::{effective_terminal, ProblemInstance};
use crate::obstacle::{self, boundary_tolerance, ObstacleSolveOptions, ObstacleStats, R0_TOL};
use crate::operators::apply_a;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Initialization {
    /// d⁰ ≡ 0: the time-consistent solve.
    #[default]
    ZeroCoupling,
    /// d⁰ = −β′(0) V⁰ with V⁰ from the zero-coupling solve.
    ExponentialProxy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FixedPointOptions {
    pub damping: f64,
    pub tol_fp: f64,
    pub max_iter: usize,
    pub init: Initialization,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions { damping: 1.0, tol_fp: 1e-6, max_iter: 100, init: Initialization::ZeroCoupling }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct EquilibriumOptions {
    pub fixed_point: FixedPointOptions,
    pub obstacle: ObstacleSolveOptions,
    pub coupling: CouplingMode,
}

/// Band margins of one coupling update against 0 ≤ d_x < H_x and
/// 0 ≤ d_xx ≤ H_xx on the waiting region (negative means violated).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Default)]
pub struct BandMargins {
    /// min d_x.
    pub gradient_lower: f64,
    /// min (H_x − d_x).
    pub gradient_upper: f64,
    /// min d_xx (second differences).
    pub curvature_lower: f64,
    /// min (H_xx − d_xx).
    pub curvature_upper: f64,
    /// Worst (x, t) for the curvature upper bound.
    pub curvature_upper_at: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// ‖vᵏ − vᵏ⁻¹‖_∞ (infinite for the first sweep).
    pub delta_v: f64,
    /// ‖d̂ᵏ − dᵏ‖_∞ of the undamped update.
    pub delta_d: f64,
    /// max |Γᵏ − Γᵏ⁻¹| over τ > 0.
    pub delta_gamma: f64,
    pub bands: BandMargins,
    pub newton_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct EquilibriumSolution {
    /// v = V_x in reversed time.
    pub v: ScalarField,
    /// V in forward time.
    pub value: ScalarField,
    pub gamma: FreeBoundary,
    /// Coupling term and its gradient (forward time) used for the final v.
    pub d: ScalarField,
    pub d_x: ScalarField,
    pub family: FamilyField,
    pub trace: Vec<IterationRecord>,
    pub converged: bool,
    /// Set when the Δv trace alternates; a smaller damping usually helps.
    pub oscillating: bool,
    pub iterations: usize,
    pub obstacle_stats: ObstacleStats,
    pub options: EquilibriumOptions,
    pub warnings: Vec<String>,
}

impl EquilibriumSolution {
    pub fn boundary_tolerance(&self) -> f64 {
        boundary_tolerance(&self.obstacle_stats)
    }
}

/// Band margins of (d, d_x) on the waiting region of each row.
pub fn band_margins(instance: &ProblemInstance, d: &ScalarField, d_x: &ScalarField, gamma: &FreeBoundary) -> BandMargins {
    let g = d.grid;
    let dx = g.dx();
    let mut b = BandMargins {
        gradient_lower: f64::INFINITY,
        gradient_upper: f64::INFINITY,
        curvature_lower: f64::INFINITY,
        curvature_upper: f64::INFINITY,
        curvature_upper_at: (f64::NAN, f64::NAN),
    };
    for n in 0..g.nt {
        let t = g.t(n);
        let gam = gamma.values[g.nt - 1 - n];
        let row = d.row(n);
        let grow = d_x.row(n);
        for i in 0..g.nx {
            let x = g.x(i);
            if x >= gam {
                break;
            }
            let hx = instance.running_loss.dx(x, t);
            b.gradient_lower = b.gradient_lower.min(grow[i]);
            b.gradient_upper = b.gradient_upper.min(hx - grow[i]);
            if i > 0 && i + 1 < g.nx && g.x(i + 1) < gam {
                let dxx = (row[i + 1] - 2.0 * row[i] + row[i - 1]) / (dx * dx);
                let hxx = instance.running_loss.dxx(x, t);
                b.curvature_lower = b.curvature_lower.min(dxx);
                if hxx - dxx < b.curvature_upper {
                    b.curvature_upper = hxx - dxx;
                    b.curvature_upper_at = (x, t);
                }
            }
        }
    }
    b
}

fn coupling_update(
    instance: &ProblemInstance,
    grid: &SpaceTimeGrid,
    gamma: &FreeBoundary,
    mode: CouplingMode,
) -> Result<(ScalarField, ScalarField)> {
    let q = solve_sensitivity_family(instance, grid, gamma)?;
    let (d, d_x) = coupling_term(&q, gamma, instance)?;
    match mode {
        CouplingMode::Family => Ok((d, d_x)),
        CouplingMode::PaperLiteral => {
            let w = coupling::paper_literal_w(instance, grid, gamma)?;
            Ok((d, w))
        }
    }
}

/// Damped Picard iteration v ↦ Γ ↦ q ↦ (d, d_x) ↦ v.
pub fn solve_equilibrium(
    instance: &ProblemInstance,
    grid: &SpaceTimeGrid,
    opts: &EquilibriumOptions,
) -> Result<EquilibriumSolution> {
    instance.validate()?;
    grid.validate()?;
    let fp = opts.fixed_point;
    if !(fp.tol_fp > 0.0 && fp.damping > 0.0 && fp.damping <= 1.0 && fp.max_iter >= 1) {
        return Err(Error::Input("fixed point needs tol_fp > 0, damping in (0, 1], max_iter ≥ 1".into()));
    }
    let mut warnings = Vec::new();
    let mut d = ScalarField::zeros(*grid, TimeAxis::Forward);
    let mut d_x = ScalarField::zeros(*grid, TimeAxis::Forward);
    if fp.init == Initialization::ExponentialProxy {
        let rho0 = -instance.discount.derivative(0.0);
        let v0 = obstacle::solve(instance, grid, &d_x, &opts.obstacle)?;
        let left = effective_terminal(instance)?.value(grid.x_min);
        let big_v = obstacle::integrate_from_left(&v0.v, left)?;
        d = big_v.map(|z| rho0 * z);
        d_x = v0.v.to_forward().map(|z| rho0 * z);
        // keep the start inside the admissible band
        let fwd = d_x.clone();
        for n in 0..grid.nt {
            let t = grid.t(n);
            for i in 0..grid.nx {
                let hx = instance.running_loss.dx(grid.x(i), t);
                d_x.set(i, n, fwd.get(i, n).clamp(0.0, 0.5 * hx));
            }
        }
    }
    let mut trace: Vec<IterationRecord> = Vec::new();
    let mut prev: Option<(ScalarField, FreeBoundary)> = None;
    let mut converged = false;
    let mut oscillating = false;
    let mut last = None;
    for k in 0..=fp.max_iter {
        let sol = obstacle::solve(instance, grid, &d_x, &opts.obstacle)?;
        let tol_g = boundary_tolerance(&sol.stats);
        let gamma = obstacle::extract_boundary(&sol.v, instance, tol_g);
        let (delta_v, delta_gamma) = match &prev {
            Some((pv, pg)) => (
                sol.v.max_abs_diff(pv),
                gamma.values[1..]
                    .iter()
                    .zip(&pg.values[1..])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
            ),
            None => (f64::INFINITY, f64::INFINITY),
        };
        if delta_v < fp.tol_fp {
            converged = true;
            info!("fixed point converged after {k} sweeps (Δv = {delta_v:e})");
            trace.push(IterationRecord {
                iteration: k,
                delta_v,
                delta_d: 0.0,
                delta_gamma,
                bands: band_margins(instance, &d, &d_x, &gamma),
                newton_iterations: sol.stats.newton_iterations,
            });
            last = Some((sol, gamma));
            break;
        }
        if k == fp.max_iter {
            trace.push(IterationRecord {
                iteration: k,
                delta_v,
                delta_d: f64::NAN,
                delta_gamma,
                bands: band_margins(instance, &d, &d_x, &gamma),
                newton_iterations: sol.stats.newton_iterations,
            });
            last = Some((sol, gamma));
            break;
        }
        let (d_new, dx_new) = coupling_update(instance, grid, &gamma, opts.coupling)?;
        let bands = band_margins(instance, &d_new, &dx_new, &gamma);
        let delta_d = d_new.max_abs_diff(&d);
        trace.push(IterationRecord {
            iteration: k,
            delta_v,
            delta_d,
            delta_gamma,
            bands,
            newton_iterations: sol.stats.newton_iterations,
        });
        let th = fp.damping;
        d = blend(&d, &d_new, th);
        d_x = blend(&d_x, &dx_new, th);
        if detect_period_two(&trace) {
            oscillating = true;
        }
        prev = Some((sol.v, gamma));
    }
    let (sol, gamma) = last.expect("at least one sweep");
    if !converged {
        warnings.push(format!("fixed point did not reach tol {} in {} sweeps", fp.tol_fp, fp.max_iter));
        if oscillating {
            warnings.push("Δv trace alternates with period two; try a smaller damping".into());
        }
        warn!("{}", warnings.join("; "));
    }
    let near = obstacle::rows_near_right_edge(&gamma, 10.0);
    if !near.is_empty() {
        warnings.push(format!(
            "Γ within 10 cells of x_max on {} of {} rows with τ > 0 (empty purchasing region inside the window)",
            near.len(),
            grid.nt - 1
        ));
    }
    let value = obstacle::integrate_from_left(&sol.v, effective_terminal(instance)?.value(grid.x_min))?;
    let family = solve_value_family(instance, grid, &gamma)?;
    let iterations = trace.last().map(|r| r.iteration).unwrap_or(0);
    Ok(EquilibriumSolution {
        v: sol.v,
        value,
        gamma,
        d,
        d_x,
        family,
        trace,
        converged,
        oscillating,
        iterations,
        obstacle_stats: sol.stats,
        options: opts.clone(),
        warnings,
    })
}

fn blend(old: &ScalarField, new: &ScalarField, theta: f64) -> ScalarField {
    if theta == 1.0 {
        return new.clone();
    }
    let mut out = old.clone();
    for n in 0..old.grid.nt {
        for i in 0..old.grid.nx {
            out.set(i, n, (1.0 - theta) * old.get(i, n) + theta * new.get(i, n));
        }
    }
    out
}

/// True when the last four finite Δv values alternate up/down without
/// overall decrease.
fn detect_period_two(trace: &[IterationRecord]) -> bool {
    let dv: Vec<f64> = trace.iter().map(|r| r.delta_v).filter(|v| v.is_finite()).collect();
    if dv.len() < 4 {
        return false;
    }
    let w = &dv[dv.len() - 4..];
    let alternating = (w[1] - w[0]) * (w[2] - w[1]) < 0.0 && (w[2] - w[1]) * (w[3] - w[2]) < 0.0;
    alternating && w[3] >= 0.9 * w[1]
}

#[derive(Debug, Clone, Serialize, Default)]
pub struct ResidualEntry {
    pub value: f64,
    pub at: (f64, f64),
}

impl ResidualEntry {
    fn worst() -> Self {
        ResidualEntry { value: 0.0, at: (f64::NAN, f64::NAN) }
    }

    fn see(&mut self, r: f64, x: f64, t: f64) {
        if r > self.value {
            self.value = r;
            self.at = (x, t);
        }
    }
}

/// Sup-norm residuals of the extended system; all entries are ≥ 0.
#[derive(Debug, Clone, Serialize, Default)]
pub struct ResidualReport {
    /// max of −(AV + H − d).
    pub hjb_first_negative: ResidualEntry,
    /// max of −(c − V_x).
    pub hjb_second_negative: ResidualEntry,
    /// max |min(AV + H − d, c − V_x)|.
    pub complementarity: ResidualEntry,
    /// max |A f^s + β(t − s) H| on the waiting region.
    pub family_interior: ResidualEntry,
    /// max |β(t − s) c − f^s_x| on the purchasing region.
    pub family_gradient: ResidualEntry,
    /// max |f^s(x, T) − β(T − s) F̃(x)|.
    pub family_terminal: ResidualEntry,
    /// max |V(x, T) − F̃(x)|.
    pub value_terminal: ResidualEntry,
}

impl ResidualReport {
    /// Largest of the three complementarity quantities.
    pub fn hjb_tolerance(&self) -> f64 {
        self.hjb_first_negative
            .value
            .max(self.hjb_second_negative.value)
            .max(self.complementarity.value)
    }
}

/// Evaluates the discrete residuals of the extended HJB system.
///
/// Interior nodes only; the time difference looks forward in t, matching the
/// implicit scheme. V_x is the centred difference of V.
pub fn verify_residuals(
    instance: &ProblemInstance,
    value: &ScalarField,
    d: &ScalarField,
    gamma: &FreeBoundary,
    family: Option<&FamilyField>,
) -> Result<ResidualReport> {
    let value = value.to_forward();
    let d = d.to_forward();
    let g = value.grid;
    let dx = g.dx();
    let term = effective_terminal(instance)?;
    let mut rep = ResidualReport {
        hjb_first_negative: ResidualEntry::worst(),
        hjb_second_negative: ResidualEntry::worst(),
        complementarity: ResidualEntry::worst(),
        family_interior: ResidualEntry::worst(),
        family_gradient: ResidualEntry::worst(),
        family_terminal: ResidualEntry::worst(),
        value_terminal: ResidualEntry::worst(),
    };
    for n in 0..g.nt - 1 {
        let t = g.t(n);
        let c = instance.cost.value(t);
        for i in 1..g.nx - 1 {
            let x = g.x(i);
            let r1 = apply_a(&value, instance, i, n)? + instance.running_loss.value(x, t) - d.get(i, n);
            let vx = (value.get(i + 1, n) - value.get(i - 1, n)) / (2.0 * dx);
            let r2 = c - vx;
            rep.hjb_first_negative.see(-r1, x, t);
            rep.hjb_second_negative.see(-r2, x, t);
            rep.complementarity.see(r1.min(r2).abs(), x, t);
        }
    }
    for i in 0..g.nx {
        let x = g.x(i);
        rep.value_terminal.see((value.get(i, g.nt - 1) - term.value(x)).abs(), x, g.horizon);
    }
    if let Some(f) = family {
        for k in 0..g.ns {
            let s = g.s(k);
            let n0 = g.first_valid_row(k);
            let bt = instance.discount.value(g.horizon - s);
            let last = f.row(g.nt - 1, k).expect("terminal row exists");
            for (i, &fv) in last.iter().enumerate() {
                let x = g.x(i);
                rep.family_terminal.see((fv - bt * term.value(x)).abs(), x, g.horizon);
            }
            for n in n0..g.nt - 1 {
                let t = g.t(n);
                let gam = gamma.values[g.nt - 1 - n];
                let bw = instance.discount.value((t - s).max(0.0));
                let c = instance.cost.value(t);
                let row = f.row(n, k).unwrap();
                let next = f.row(n + 1, k).unwrap();
                for i in 1..g.nx - 1 {
                    let x = g.x(i);
                    if g.x(i + 1) < gam {
                        let sig = instance.volatility.value(x, t);
                        let ft = (next[i] - row[i]) / g.dt();
                        let fx = (row[i + 1] - row[i - 1]) / (2.0 * dx);
                        let fxx = (row[i + 1] - 2.0 * row[i] + row[i - 1]) / (dx * dx);
                        let r = ft
                            + instance.drift.value(x, t) * fx
                            + 0.5 * sig * sig * fxx
                            + bw * instance.running_loss.value(x, t);
                        rep.family_interior.see(r.abs(), x, t);
                    } else if g.x(i - 1) >= gam {
                        let fx = (row[i + 1] - row[i - 1]) / (2.0 * dx);
                        rep.family_gradient.see((bw * c - fx).abs(), x, t);
                    }
                }
            }
        }
    }
    Ok(rep)
}

/// Residuals of a solved equilibrium.
pub fn verify_solution(sol: &EquilibriumSolution, instance: &ProblemInstance) -> Result<ResidualReport> {
    verify_residuals(instance, &sol.value, &sol.d, &sol.gamma, Some(&sol.family))
}

#[derive(Debug, Clone, Serialize)]
pub struct OracleReport {
    pub gamma: f64,
    /// max |f^s − e^{−γ(t−s)} V| / (1 + |V|) over valid nodes.
    pub e1: f64,
    /// max |d − γ V| / (1 + |V|).
    pub e2: f64,
    /// max |d_x − γ v| / (1 + |v|) for the coupling gradient in use.
    pub e_gradient: f64,
    /// Same comparison for the standalone w equation.
    pub e_literal: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Relative gaps between a solved equilibrium and the exponential relations
/// f^s = e^{−γ(t−s)} V and d = γ V.
pub fn oracle_gaps(sol: &EquilibriumSolution, instance: &ProblemInstance) -> Result<OracleReport> {
    let gamma_rate = instance
        .discount
        .exponential_rate()
        .ok_or_else(|| Error::Contract(format!("oracle needs an exponential discount, got {:?}", instance.discount)))?;
    let g = sol.value.grid;
    let big_v = &sol.value;
    let v_fwd = sol.v.to_forward();
    let mut e1 = 0.0f64;
    for k in 0..g.ns {
        let s = g.s(k);
        for n in g.first_valid_row(k)..g.nt {
            let t = g.t(n);
            let w = (-gamma_rate * (t - s).max(0.0)).exp();
            let row = sol.family.row(n, k).unwrap();
            for (i, &f) in row.iter().enumerate() {
                let vv = big_v.get(i, n);
                e1 = e1.max((f - w * vv).abs() / (1.0 + vv.abs()));
            }
        }
    }
    let mut e2 = 0.0f64;
    let mut eg = 0.0f64;
    for n in 0..g.nt {
        for i in 0..g.nx {
            let vv = big_v.get(i, n);
            e2 = e2.max((sol.d.get(i, n) - gamma_rate * vv).abs() / (1.0 + vv.abs()));
            let sv = v_fwd.get(i, n);
            eg = eg.max((sol.d_x.get(i, n) - gamma_rate * sv).abs() / (1.0 + sv.abs()));
        }
    }
    let w = coupling::paper_literal_w(instance, &g, &sol.gamma)?;
    let mut el = 0.0f64;
    for n in 0..g.nt {
        for i in 0..g.nx {
            let sv = v_fwd.get(i, n);
            el = el.max((w.get(i, n) - gamma_rate * sv).abs() / (1.0 + sv.abs()));
        }
    }
    Ok(OracleReport {
        gamma: gamma_rate,
        e1,
        e2,
        e_gradient: eg,
        e_literal: el,
        iterations: sol.iterations,
        converged: sol.converged,
    })
}

/// Solves with an exponential discount and reports the oracle gaps.
pub fn exponential_oracle(
    instance: &ProblemInstance,
    grid: &SpaceTimeGrid,
    opts: &EquilibriumOptions,
) -> Result<(EquilibriumSolution, OracleReport)> {
    if instance.discount.exponential_rate().is_none() {
        return Err(Error::Contract(format!(
            "oracle needs an exponential discount, got {:?}",
            instance.discount
        )));
    }
    let sol = solve_equilibrium(instance, grid, opts)?;
    let rep = oracle_gaps(&sol, instance)?;
    Ok((sol, rep))
}

/// Left-tail check v ≤ C κ(x, T − τ) for x ≤ −1 with C = max(M, max c).
/// Returns the worst ratio v / (C κ) (≤ 1 passes).
pub fn left_tail_ratio(v: &ScalarField, instance: &ProblemInstance) -> f64 {
    let v = v.to_reversed();
    let g = v.grid;
    let c_max = (0..g.nt).map(|n| instance.cost.value(g.t(n))).fold(0.0, f64::max);
    let big_c = instance.bound_m.max(c_max);
    let mut worst = 0.0f64;
    for m in 0..g.nt {
        let t = g.horizon - g.t(m);
        for i in 0..g.nx {
            let x = g.x(i);
            if x > -1.0 {
                break;
            }
            let bound = big_c * instance.kappa.value(x, t);
            worst = worst.max(v.get(i, m) / bound);
        }
    }
    worst
}

/// Margin check R₀ with the shared tolerance.
pub fn bands_hold(b: &BandMargins) -> bool {
    b.gradient_lower >= -R0_TOL
        && b.gradient_upper > -R0_TOL
        && b.curvature_lower >= -R0_TOL
        && b.curvature_upper >= -R0_TOL
}

/// Margins of the structural properties of v (negative means violated).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InvariantReport {
    /// min (v − F̃′ + 1e-8).
    pub lower: f64,
    /// Worst (x, τ) for `lower`.
    pub lower_at: (f64, f64),
    /// min (c + slack − v).
    pub upper: f64,
    /// min of forward differences in x (plus 1e-8).
    pub monotone_x: f64,
    /// min of forward differences in τ (plus 1e-8).
    pub monotone_tau: f64,
    /// Worst v / (C κ) for x ≤ −1 (≤ 1 passes).
    pub left_tail_ratio: f64,
}

impl InvariantReport {
    pub fn all_hold(&self) -> bool {
        self.lower >= 0.0
            && self.upper >= 0.0
            && self.monotone_x >= 0.0
            && self.monotone_tau >= 0.0
            && self.left_tail_ratio <= 1.0
    }
}

/// Nodewise F̃′ ≤ v ≤ c, monotonicity in x and τ, and the left-tail bound.
/// `upper_slack` absorbs the penalty overshoot above c.
pub fn invariant_report(v: &ScalarField, instance: &ProblemInstance, upper_slack: f64) -> Result<InvariantReport> {
    const SLACK: f64 = 1e-8;
    let rv = v.to_reversed();
    let g = rv.grid;
    let term = effective_terminal(instance)?;
    let mut rep = InvariantReport {
        lower: f64::INFINITY,
        lower_at: (f64::NAN, f64::NAN),
        upper: f64::INFINITY,
        monotone_x: f64::INFINITY,
        monotone_tau: f64::INFINITY,
        left_tail_ratio: left_tail_ratio(v, instance),
    };
    for m in 0..g.nt {
        let tau = g.t(m);
        let c = instance.cost.value(g.horizon - tau);
        for i in 0..g.nx {
            let x = g.x(i);
            let val = rv.get(i, m);
            let lo = val - term.slope(x) + SLACK;
            if lo < rep.lower {
                rep.lower = lo;
                rep.lower_at = (x, tau);
            }
            rep.upper = rep.upper.min(c + upper_slack - val);
            if i + 1 < g.nx {
                rep.monotone_x = rep.monotone_x.min(rv.get(i + 1, m) - val + SLACK);
            }
            if m + 1 < g.nt {
                rep.monotone_tau = rep.monotone_tau.min(rv.get(i, m + 1) - val + SLACK);
            }
        }
    }
    Ok(rep)
}
