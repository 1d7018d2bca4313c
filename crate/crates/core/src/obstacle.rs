//! The obstacle problem for v = V_x in reversed time:
//!
//! min{ L v + H_x − d_x, c − v } = 0,  v(x, 0) = F̃′(x),
//!
//! on a truncated window with Dirichlet data F̃′(x_min) and c at x_max. Two
//! independent solver paths: a penalty formulation marched with Newton and
//! ε continuation, and projected SOR on the discrete complementarity problem.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FreeBoundary, ScalarField, SpaceTimeGrid, TimeAxis};
use crate::model::{effective_terminal, ProblemInstance};
use crate::operators::{penalty, thomas, NodeCoeffs, OperatorStencil, PenaltyParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverPath {
    Penalty,
    Direct,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ObstacleSolveOptions {
    /// Decreasing penalty sharpness levels; the last one is the result.
    pub eps_schedule: Vec<f64>,
    pub newton_tol: f64,
    pub newton_max_iter: usize,
    /// Step halvings allowed before a Newton failure becomes an error.
    pub max_halvings: usize,
    pub psor_tol: f64,
    pub psor_omega: f64,
    pub psor_max_iter: usize,
    pub path: SolverPath,
}

impl Default for ObstacleSolveOptions {
    fn default() -> Self {
        ObstacleSolveOptions {
            eps_schedule: geometric_schedule(1e-1, 1e-4, 4),
            newton_tol: 1e-13,
            newton_max_iter: 60,
            max_halvings: 6,
            psor_tol: 1e-12,
            psor_omega: 1.2,
            psor_max_iter: 200_000,
            path: SolverPath::Penalty,
        }
    }
}

impl ObstacleSolveOptions {
    pub fn eps_final(&self) -> f64 {
        *self.eps_schedule.last().expect("non-empty ε schedule")
    }

    pub fn with_eps_final(mut self, eps: f64) -> Self {
        let start = self.eps_schedule.first().copied().unwrap_or(1e-1).max(eps);
        let levels = ((start / eps).log10().round() as usize + 1).max(1);
        self.eps_schedule = geometric_schedule(start, eps, levels);
        self
    }

    fn validate(&self) -> Result<()> {
        if self.eps_schedule.is_empty() || self.eps_schedule.iter().any(|e| !(*e > 0.0)) {
            return Err(Error::Input("ε schedule must be non-empty and positive".into()));
        }
        if !(self.newton_tol > 0.0 && self.psor_tol > 0.0) {
            return Err(Error::Input("solver tolerances must be positive".into()));
        }
        if !(self.psor_omega > 0.0 && self.psor_omega < 2.0) {
            return Err(Error::Input("relaxation factor must lie in (0, 2)".into()));
        }
        Ok(())
    }
}

/// `levels` values from `hi` down to `lo`, equally spaced in log scale.
pub fn geometric_schedule(hi: f64, lo: f64, levels: usize) -> Vec<f64> {
    if levels <= 1 {
        return vec![lo];
    }
    let r = (lo / hi).powf(1.0 / (levels - 1) as f64);
    let mut v: Vec<f64> = (0..levels).map(|k| hi * r.powi(k as i32)).collect();
    *v.last_mut().unwrap() = lo;
    v
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ObstacleStats {
    pub newton_iterations: usize,
    pub max_newton_per_step: usize,
    pub halvings: usize,
    pub psor_sweeps: usize,
    pub penalty_scale: f64,
    pub eps_final: f64,
    pub upwinded_nodes: usize,
}

/// Solution of one obstacle solve: v in reversed time plus diagnostics.
#[derive(Debug, Clone)]
pub struct ObstacleSolution {
    pub v: ScalarField,
    pub stats: ObstacleStats,
}

/// Per-step data shared by both solver paths.
struct StepContext<'a> {
    instance: &'a ProblemInstance,
    grid: SpaceTimeGrid,
    xs: Vec<f64>,
    /// d_x in forward time.
    dx_coupling: &'a ScalarField,
    left: f64,
}

impl StepContext<'_> {
    /// Coefficients at reversed time τ, with the coupling gradient linearly
    /// interpolated in time between grid rows.
    fn coeffs(&self, tau: f64) -> Vec<NodeCoeffs> {
        let t = self.grid.horizon - tau;
        let g = &self.grid;
        let r = (t / g.dt()).clamp(0.0, (g.nt - 1) as f64);
        let n = (r.floor() as usize).min(g.nt - 2);
        let w = r - n as f64;
        let (lo, hi) = (self.dx_coupling.row(n), self.dx_coupling.row(n + 1));
        self.xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let s = self.instance.volatility.value(x, t);
                let dc = (1.0 - w) * lo[i] + w * hi[i];
                NodeCoeffs {
                    diffusion: 0.5 * s * s,
                    advection: s * self.instance.volatility.dx(x, t) + self.instance.drift.value(x, t),
                    reaction: self.instance.drift.dx(x, t),
                    source: self.instance.running_loss.dx(x, t) - dc,
                }
            })
            .collect()
    }

    fn obstacle(&self, tau: f64) -> f64 {
        self.instance.cost.value(self.grid.horizon - tau)
    }
}

/// Checks 0 ≤ d_x < H_x on the grid (up to `R0_TOL`) and returns the
/// penalty scale 0.9 · min(H_x − d_x).
pub fn penalty_scale(instance: &ProblemInstance, dx_coupling: &ScalarField) -> Result<f64> {
    let g = dx_coupling.grid;
    let fwd = dx_coupling.to_forward();
    let mut min_gap = f64::INFINITY;
    for n in 0..g.nt {
        let t = g.t(n);
        // edge nodes carry Dirichlet data, so d_x never enters their rows
        for i in 1..g.nx - 1 {
            let x = g.x(i);
            let dc = fwd.get(i, n);
            let hx = instance.running_loss.dx(x, t);
            if dc < -R0_TOL || dc >= hx + R0_TOL {
                return Err(Error::Contract(format!(
                    "coupling gradient outside [0, H_x) at x = {x}, t = {t}: d_x = {dc:e}, H_x = {hx:e}"
                )));
            }
            min_gap = min_gap.min(hx - dc);
        }
    }
    Ok((0.9 * min_gap).max(f64::MIN_POSITIVE))
}

/// Slack allowed in the coupling-gradient band checks.
pub const R0_TOL: f64 = 1e-8;

fn initial_row(instance: &ProblemInstance, grid: &SpaceTimeGrid) -> Result<Vec<f64>> {
    let term = effective_terminal(instance)?;
    let c_end = instance.cost.value(grid.horizon);
    // Rows already at the obstacle stay clamped to it.
    Ok(grid.xs().iter().map(|&x| term.slope(x).min(c_end)).collect())
}

/// Penalised march with Newton per step and ε continuation.
pub fn solve_penalized(
    instance: &ProblemInstance,
    grid: &SpaceTimeGrid,
    dx_coupling: &ScalarField,
    opts: &ObstacleSolveOptions,
) -> Result<ObstacleSolution> {
    opts.validate()?;
    let scale = penalty_scale(instance, dx_coupling)?;
    let fwd = dx_coupling.to_forward();
    let term = effective_terminal(instance)?;
    let ctx = StepContext {
        instance,
        grid: *grid,
        xs: grid.xs(),
        dx_coupling: &fwd,
        left: term.slope(grid.x_min),
    };
    let mut stats = ObstacleStats { penalty_scale: scale, eps_final: opts.eps_final(), ..Default::default() };
    let mut v = ScalarField::zeros(*grid, TimeAxis::Reversed);
    v.row_mut(0).copy_from_slice(&initial_row(instance, grid)?);
    let dt = grid.dt();
    for m in 0..grid.nt - 1 {
        let prev = v.row(m).to_vec();
        let next = penalty_step(&ctx, &prev, grid.t(m), dt, scale, opts, 0, m + 1, &mut stats)?;
        v.row_mut(m + 1).copy_from_slice(&next);
    }
    Ok(ObstacleSolution { v, stats })
}

#[allow(clippy::too_many_arguments)]
fn penalty_step(
    ctx: &StepContext,
    prev: &[f64],
    tau0: f64,
    dt: f64,
    scale: f64,
    opts: &ObstacleSolveOptions,
    depth: usize,
    row: usize,
    stats: &mut ObstacleStats,
) -> Result<Vec<f64>> {
    let tau = tau0 + dt;
    let coeffs = ctx.coeffs(tau);
    let dx = ctx.grid.dx();
    let mut st = OperatorStencil::assemble(dx, dt, &coeffs, prev);
    stats.upwinded_nodes += st.upwinded;
    let obst = ctx.obstacle(tau);
    let n = prev.len();
    set_dirichlet(&mut st, 0, ctx.left);
    set_dirichlet(&mut st, n - 1, obst);
    let mut u = prev.to_vec();
    u[0] = ctx.left;
    u[n - 1] = obst;
    let mut failed = None;
    'levels: for &eps in &opts.eps_schedule {
        let p = PenaltyParams { eps, scale };
        match newton(&st, &mut u, obst, dt, p, opts) {
            Ok(its) => {
                stats.newton_iterations += its;
                stats.max_newton_per_step = stats.max_newton_per_step.max(its);
            }
            Err(detail) => {
                failed = Some(detail);
                break 'levels;
            }
        }
    }
    match failed {
        None => Ok(u),
        Some(detail) if depth < opts.max_halvings => {
            stats.halvings += 1;
            warn!("Newton failed at row {row} ({detail}); halving the step");
            let mid = penalty_step(ctx, prev, tau0, 0.5 * dt, scale, opts, depth + 1, row, stats)?;
            penalty_step(ctx, &mid, tau0 + 0.5 * dt, 0.5 * dt, scale, opts, depth + 1, row, stats)
        }
        Some(detail) => Err(Error::Newton { row, detail }),
    }
}

fn set_dirichlet(st: &mut OperatorStencil, i: usize, v: f64) {
    st.lower[i] = 0.0;
    st.upper[i] = 0.0;
    st.diag[i] = 1.0;
    st.rhs[i] = v;
}

/// Newton on M u − Δτ·α(c − u) = rhs at interior nodes. Returns the number
/// of iterations.
fn newton(
    st: &OperatorStencil,
    u: &mut [f64],
    obst: f64,
    dt: f64,
    p: PenaltyParams,
    opts: &ObstacleSolveOptions,
) -> std::result::Result<usize, String> {
    let n = u.len();
    let mut diag = st.diag.clone();
    let mut res = vec![0.0; n];
    for it in 1..=opts.newton_max_iter {
        for i in 0..n {
            let mut r = st.diag[i] * u[i] - st.rhs[i];
            if i > 0 {
                r += st.lower[i] * u[i - 1];
            }
            if i + 1 < n {
                r += st.upper[i] * u[i + 1];
            }
            diag[i] = st.diag[i];
            if i > 0 && i + 1 < n {
                let (a, da) = penalty(obst - u[i], p);
                r -= dt * a;
                diag[i] += dt * da;
            }
            res[i] = -r;
        }
        let du = thomas(&st.lower, &diag, &st.upper, &res).map_err(|e| e.to_string())?;
        let mut step = 0.0f64;
        for i in 0..n {
            u[i] += du[i];
            step = step.max(du[i].abs());
        }
        if !step.is_finite() {
            return Err("non-finite Newton update".into());
        }
        let scale = 1.0 + obst.abs();
        if step <= opts.newton_tol * scale {
            return Ok(it);
        }
    }
    Err(format!("no convergence in {} iterations", opts.newton_max_iter))
}

/// Projected SOR on the complementarity problem of each implicit step.
pub fn solve_direct(
    instance: &ProblemInstance,
    grid: &SpaceTimeGrid,
    dx_coupling: &ScalarField,
    opts: &ObstacleSolveOptions,
) -> Result<ObstacleSolution> {
    opts.validate()?;
    let scale = penalty_scale(instance, dx_coupling)?;
    let fwd = dx_coupling.to_forward();
    let term = effective_terminal(instance)?;
    let ctx = StepContext {
        instance,
        grid: *grid,
        xs: grid.xs(),
        dx_coupling: &fwd,
        left: term.slope(grid.x_min),
    };
    let mut stats = ObstacleStats { penalty_scale: scale, eps_final: 0.0, ..Default::default() };
    let mut v = ScalarField::zeros(*grid, TimeAxis::Reversed);
    v.row_mut(0).copy_from_slice(&initial_row(instance, grid)?);
    let dt = grid.dt();
    let dx = grid.dx();
    let n = grid.nx;
    for m in 0..grid.nt - 1 {
        let tau = grid.t(m + 1);
        let prev = v.row(m).to_vec();
        let coeffs = ctx.coeffs(tau);
        let st = OperatorStencil::assemble(dx, dt, &coeffs, &prev);
        stats.upwinded_nodes += st.upwinded;
        let obst = ctx.obstacle(tau);
        // Warm start from the unconstrained step, projected.
        let mut free = st.clone();
        set_dirichlet(&mut free, 0, ctx.left);
        set_dirichlet(&mut free, n - 1, obst);
        let mut u: Vec<f64> = thomas(&free.lower, &free.diag, &free.upper, &free.rhs)?
            .into_iter()
            .map(|x| x.min(obst))
            .collect();
        u[0] = ctx.left;
        u[n - 1] = obst;
        let sweeps = psor(&st, &mut u, obst, opts).map_err(|history| Error::Stagnation { row: m + 1, history })?;
        stats.psor_sweeps += sweeps;
        v.row_mut(m + 1).copy_from_slice(&u);
    }
    Ok(ObstacleSolution { v, stats })
}

/// Complementarity residual max_i |min((rhs − M u)_i, c − u_i)| over interior
/// rows: the upper obstacle u ≤ c leaves M u ≤ rhs where it binds.
fn lcp_residual(st: &OperatorStencil, u: &[f64], obst: f64) -> f64 {
    let n = u.len();
    (1..n - 1)
        .map(|i| {
            let r = st.rhs[i] - st.lower[i] * u[i - 1] - st.diag[i] * u[i] - st.upper[i] * u[i + 1];
            r.min(obst - u[i]).abs()
        })
        .fold(0.0, f64::max)
}

fn psor(st: &OperatorStencil, u: &mut [f64], obst: f64, opts: &ObstacleSolveOptions) -> std::result::Result<usize, Vec<f64>> {
    let n = u.len();
    let mut history = Vec::new();
    for sweep in 1..=opts.psor_max_iter {
        for i in 1..n - 1 {
            let gs = (st.rhs[i] - st.lower[i] * u[i - 1] - st.upper[i] * u[i + 1]) / st.diag[i];
            let relaxed = u[i] + opts.psor_omega * (gs - u[i]);
            u[i] = relaxed.min(obst);
        }
        if sweep % 10 == 0 || sweep == 1 {
            let r = lcp_residual(st, u, obst);
            if history.len() < 64 {
                history.push(r);
            }
            if r <= opts.psor_tol * (1.0 + obst.abs()) {
                return Ok(sweep);
            }
        }
    }
    Err(history)
}

/// Dispatches on the configured solver path.
pub fn solve(
    instance: &ProblemInstance,
    grid: &SpaceTimeGrid,
    dx_coupling: &ScalarField,
    opts: &ObstacleSolveOptions,
) -> Result<ObstacleSolution> {
    match opts.path {
        SolverPath::Penalty => solve_penalized(instance, grid, dx_coupling, opts),
        SolverPath::Direct => solve_direct(instance, grid, dx_coupling, opts),
    }
}

/// Default location tolerance for the boundary: the penalty smearing scale.
pub fn boundary_tolerance(stats: &ObstacleStats) -> f64 {
    10.0 * stats.eps_final * stats.penalty_scale
}

/// Γ(τ) = smallest x with c(T − τ) − v(x, τ) ≤ tol, per reversed row.
/// Rows without a crossing get Γ = x_max and are listed as truncated.
pub fn extract_boundary(v: &ScalarField, instance: &ProblemInstance, tol: f64) -> FreeBoundary {
    let v = v.to_reversed();
    let g = v.grid;
    let mut values = Vec::with_capacity(g.nt);
    let mut truncated = Vec::new();
    for m in 0..g.nt {
        let c = instance.cost.value(g.horizon - g.t(m));
        let row = v.row(m);
        let gap = |i: usize| c - row[i] - tol;
        match (0..g.nx).find(|&i| gap(i) <= 0.0) {
            None => {
                truncated.push(m);
                values.push(g.x_max);
            }
            Some(0) => values.push(g.x_min),
            Some(i) => {
                let (z0, z1) = (gap(i - 1), gap(i));
                let w = if z0 - z1 > 0.0 { z0 / (z0 - z1) } else { 1.0 };
                values.push((g.x(i - 1) + w * g.dx()).min(g.x(i)));
            }
        }
    }
    if !truncated.is_empty() {
        warn!("no purchasing region inside the window on {} rows; widen x_max", truncated.len());
    }
    FreeBoundary { grid: g, values, truncated_rows: truncated }
}

/// Reversed rows τ > 0 where Γ sits within `cells` grid cells of x_max.
pub fn rows_near_right_edge(gamma: &FreeBoundary, cells: f64) -> Vec<usize> {
    let g = gamma.grid;
    (1..g.nt)
        .filter(|&m| gamma.values[m] >= g.x_max - cells * g.dx())
        .collect()
}

/// Left-truncation threshold for v.
pub const LEFT_TAIL_TOL: f64 = 1e-8;

/// V(x, t) = g(x, T − t) with g(x, τ) = ∫_{x_min}^x v(z, τ) dz (trapezoid).
pub fn integrate_to_value(v: &ScalarField) -> Result<ScalarField> {
    integrate_from_left(v, 0.0)
}

/// Same integral plus the value at the left edge. The terminal row then
/// matches F̃ up to the O(Δx²) quadrature error of F̃′, which has a kink at
/// the terminal purchase threshold. Anchoring every row to F̃ exactly would
/// instead carry that kink-cell defect into all rows as a step.
pub fn integrate_from_left(v: &ScalarField, left: f64) -> Result<ScalarField> {
    let rev = v.to_reversed();
    let g = rev.grid;
    let dx = g.dx();
    let mut out = ScalarField::zeros(g, TimeAxis::Reversed);
    for m in 0..g.nt {
        let row = rev.row(m);
        if row[0].abs() >= LEFT_TAIL_TOL {
            return Err(Error::Window(format!(
                "v(x_min) = {:e} at τ = {} exceeds {LEFT_TAIL_TOL:e}; move x_min left",
                row[0],
                g.t(m)
            )));
        }
        if let Some(i) = row.iter().position(|&z| z < -1e-10) {
            return Err(Error::Contract(format!("v is negative at x = {}, τ = {}", g.x(i), g.t(m))));
        }
        let o = out.row_mut(m);
        let mut acc = left;
        o[0] = acc;
        for i in 1..g.nx {
            acc += 0.5 * dx * (row[i - 1] + row[i]);
            o[i] = acc;
        }
    }
    Ok(out.flipped())
}
