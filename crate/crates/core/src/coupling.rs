//! The auxiliary family on a given boundary.
//!
//! For each s the slice f^s solves, in reversed time τ = T − t,
//!
//!   g_τ = ½σ² g_xx + μ g_x + ω(t − s) H   for x < Γ(τ),
//!   g_x = ω(t − s) c                      for x ≥ Γ(τ),
//!   g(x, 0) = ω(T − s) F̃(x),
//!
//! with weight ω = β for the value family and ω = −β′ for its s-derivative.
//! Slices are marched on the fixed x grid; the Neumann condition at the
//! moving boundary is closed by a quadratic ghost value and the purchasing
//! region is filled affinely from the boundary value.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{diag_extract, FamilyField, FreeBoundary, ScalarField, SpaceTimeGrid, TimeAxis};
use crate::model::{effective_terminal, EffectiveTerminal, ProblemInstance};
use crate::operators::{thomas, NodeCoeffs, OperatorStencil};

/// Which equation produces the coupling gradient fed back to the obstacle
/// problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum CouplingMode {
    /// Diagonal of the s-derivative family.
    #[default]
    Family,
    /// Standalone equation L w − β′(0) H_x = 0 for the diagonal gradient.
    PaperLiteral,
}

#[derive(Debug, Clone, Copy)]
enum Weight {
    Value,
    Sensitivity,
}

impl Weight {
    fn eval(self, instance: &ProblemInstance, u: f64) -> f64 {
        let (b, db) = instance.discount.eval(u.max(0.0));
        match self {
            Weight::Value => b,
            Weight::Sensitivity => -db,
        }
    }
}

/// Position of the boundary relative to the x grid.
struct Split {
    /// Last node strictly inside the waiting region.
    last: usize,
    /// Γ − x_last ∈ (0, Δx].
    delta: f64,
}

fn split(grid: &SpaceTimeGrid, gamma: f64) -> Result<Split> {
    let dx = grid.dx();
    let gamma = gamma.min(grid.x_max);
    let r = (gamma - grid.x_min) / dx;
    // last node with x < Γ
    let mut last = (r.ceil() as isize - 1).max(0) as usize;
    last = last.min(grid.nx - 2);
    while last > 0 && grid.x(last) >= gamma {
        last -= 1;
    }
    if last < 2 {
        return Err(Error::Contract(format!(
            "boundary Γ = {gamma} leaves fewer than three waiting nodes; move x_min left"
        )));
    }
    Ok(Split { last, delta: gamma - grid.x(last) })
}

struct SliceContext<'a> {
    instance: &'a ProblemInstance,
    terminal: EffectiveTerminal,
    grid: SpaceTimeGrid,
    gamma: &'a FreeBoundary,
    xs: Vec<f64>,
}

impl SliceContext<'_> {
    /// Solves slice s and returns its rows in forward time from the first
    /// valid row up to T.
    fn solve(&self, k: usize, weight: Weight) -> Result<Vec<f64>> {
        let g = &self.grid;
        let s = g.s(k);
        let n0 = g.first_valid_row(k);
        let steps = g.nt - 1 - n0;
        let nx = g.nx;
        let dx = g.dx();
        let dt = g.dt();
        let inst = self.instance;
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
        let w_end = weight.eval(inst, g.horizon - s);
        rows.push(self.xs.iter().map(|&x| w_end * self.terminal.value(x)).collect());
        for m in 0..steps {
            let tau = g.t(m + 1);
            let t = g.horizon - tau;
            let w = weight.eval(inst, t - s);
            let prev = &rows[m];
            let coeffs: Vec<NodeCoeffs> = self
                .xs
                .iter()
                .map(|&x| {
                    let sig = inst.volatility.value(x, t);
                    NodeCoeffs {
                        diffusion: 0.5 * sig * sig,
                        advection: inst.drift.value(x, t),
                        reaction: 0.0,
                        source: w * inst.running_loss.value(x, t),
                    }
                })
                .collect();
            let sp = split(g, self.gamma.values[m + 1])?;
            let slope = w * inst.cost.value(t);
            let next = neumann_step(dx, dt, &coeffs, prev, &sp, slope)?;
            debug_assert_eq!(next.len(), nx);
            rows.push(next);
        }
        rows.reverse();
        Ok(rows.concat())
    }
}

/// One implicit step on the waiting nodes with Dirichlet 0 at x_min and the
/// quadratic ghost closure at Γ, then the affine fill of the purchasing nodes.
fn neumann_step(dx: f64, dt: f64, coeffs: &[NodeCoeffs], prev: &[f64], sp: &Split, slope: f64) -> Result<Vec<f64>> {
    let m = sp.last;
    let nw = m + 1;
    let mut st = OperatorStencil::assemble(dx, dt, &coeffs[..nw + 1], &prev[..nw + 1]);
    st.lower.truncate(nw);
    st.diag.truncate(nw);
    st.upper.truncate(nw);
    st.rhs.truncate(nw);
    st.lower[0] = 0.0;
    st.upper[0] = 0.0;
    st.diag[0] = 1.0;
    st.rhs[0] = 0.0;
    // ghost g_{m+1} = (2 − r) g_m − (1 − r) g_{m−1} + r Δx ω c
    let r = 2.0 * dx / (dx + 2.0 * sp.delta);
    let up = st.upper[m];
    st.lower[m] -= (1.0 - r) * up;
    st.diag[m] += (2.0 - r) * up;
    st.rhs[m] -= up * r * dx * slope;
    st.upper[m] = 0.0;
    let mut out = thomas(&st.lower, &st.diag, &st.upper, &st.rhs)?;
    let d1 = (out[m] - out[m - 1]) / dx;
    let bq = (slope - d1) / (dx + 2.0 * sp.delta);
    let aq = d1 + bq * dx;
    let at_gamma = out[m] + aq * sp.delta + bq * sp.delta * sp.delta;
    let gamma_x = sp.delta; // offset from x_m
    out.resize(prev.len(), 0.0);
    for (j, o) in out.iter_mut().enumerate().skip(m + 1) {
        let offset = (j - m) as f64 * dx - gamma_x;
        *o = at_gamma + slope * offset;
    }
    Ok(out)
}

fn solve_family(instance: &ProblemInstance, grid: &SpaceTimeGrid, gamma: &FreeBoundary, weight: Weight) -> Result<FamilyField> {
    let ctx = SliceContext {
        instance,
        terminal: effective_terminal(instance)?,
        grid: *grid,
        gamma,
        xs: grid.xs(),
    };
    let slices: Result<Vec<Vec<f64>>> = (0..grid.ns).into_par_iter().map(|k| ctx.solve(k, weight)).collect();
    FamilyField::from_slices(*grid, slices?)
}

/// The value family {f^s}.
pub fn solve_value_family(instance: &ProblemInstance, grid: &SpaceTimeGrid, gamma: &FreeBoundary) -> Result<FamilyField> {
    solve_family(instance, grid, gamma, Weight::Value)
}

/// The s-derivative family q^s = ∂_s f^s.
pub fn solve_sensitivity_family(instance: &ProblemInstance, grid: &SpaceTimeGrid, gamma: &FreeBoundary) -> Result<FamilyField> {
    if instance.discount.is_flat() {
        return Ok(FamilyField::from_fn(*grid, |_, _, _| 0.0));
    }
    solve_family(instance, grid, gamma, Weight::Sensitivity)
}

/// d = q(x, t, t) and its x-gradient, both in forward time. The gradient is
/// centred inside the waiting region, one-sided next to Γ and at x_min, and
/// equals −β′(0) c(t) in the purchasing region.
pub fn coupling_term(
    q: &FamilyField,
    gamma: &FreeBoundary,
    instance: &ProblemInstance,
) -> Result<(ScalarField, ScalarField)> {
    let d = diag_extract(q)?;
    let g = d.grid;
    let dx = g.dx();
    let rho0 = -instance.discount.derivative(0.0);
    let mut d_x = ScalarField::zeros(g, TimeAxis::Forward);
    for n in 0..g.nt {
        let t = g.t(n);
        let m_rev = g.nt - 1 - n;
        let row = d.row(n);
        let out = d_x.row_mut(n);
        let gam = gamma.values[m_rev];
        let p_slope = rho0 * instance.cost.value(t);
        let last = match split(&g, gam) {
            Ok(sp) => sp.last,
            Err(_) => {
                out.fill(p_slope);
                continue;
            }
        };
        out[0] = (-3.0 * row[0] + 4.0 * row[1] - row[2]) / (2.0 * dx);
        for i in 1..last {
            out[i] = (row[i + 1] - row[i - 1]) / (2.0 * dx);
        }
        out[last] = (3.0 * row[last] - 4.0 * row[last - 1] + row[last - 2]) / (2.0 * dx);
        for o in out.iter_mut().skip(last + 1) {
            *o = p_slope;
        }
    }
    Ok((d, d_x))
}

/// Diagnostic: solves L w − β′(0) H_x = 0 for x < Γ, w = −β′(0) c for
/// x ≥ Γ, w(x, 0) = −β′(0) F̃′(x). Returned in forward time. The boundary
/// value is imposed at the first purchasing node (first order in Γ).
pub fn paper_literal_w(instance: &ProblemInstance, grid: &SpaceTimeGrid, gamma: &FreeBoundary) -> Result<ScalarField> {
    let rho0 = -instance.discount.derivative(0.0);
    let term = effective_terminal(instance)?;
    let xs = grid.xs();
    let mut w = ScalarField::zeros(*grid, TimeAxis::Reversed);
    if rho0 == 0.0 {
        return Ok(w.flipped());
    }
    let row0: Vec<f64> = xs.iter().map(|&x| rho0 * term.slope(x)).collect();
    w.row_mut(0).copy_from_slice(&row0);
    let (dx, dt) = (grid.dx(), grid.dt());
    let left = rho0 * term.slope(grid.x_min);
    for m in 0..grid.nt - 1 {
        let tau = grid.t(m + 1);
        let t = grid.horizon - tau;
        let coeffs: Vec<NodeCoeffs> = xs
            .iter()
            .map(|&x| {
                let s = instance.volatility.value(x, t);
                NodeCoeffs {
                    diffusion: 0.5 * s * s,
                    advection: s * instance.volatility.dx(x, t) + instance.drift.value(x, t),
                    reaction: instance.drift.dx(x, t),
                    source: rho0 * instance.running_loss.dx(x, t),
                }
            })
            .collect();
        let prev = w.row(m).to_vec();
        let mut st = OperatorStencil::assemble(dx, dt, &coeffs, &prev);
        let p_val = rho0 * instance.cost.value(t);
        let gam = gamma.values[m + 1];
        for i in 0..grid.nx {
            let fixed = if i == 0 {
                Some(left)
            } else if xs[i] >= gam || i + 1 == grid.nx {
                Some(p_val)
            } else {
                None
            };
            if let Some(v) = fixed {
                st.lower[i] = 0.0;
                st.upper[i] = 0.0;
                st.diag[i] = 1.0;
                st.rhs[i] = v;
            }
        }
        let next = thomas(&st.lower, &st.diag, &st.upper, &st.rhs)?;
        w.row_mut(m + 1).copy_from_slice(&next);
    }
    Ok(w.flipped())
}
