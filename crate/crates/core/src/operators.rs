//! Discrete parabolic operators, the penalty function and the implicit
//! Euler kernel.

use crate::error::{Error, Result};
use crate::grid::{ScalarField, TimeAxis};
use crate::model::ProblemInstance;

/// Coefficients of u_τ = D u_xx + B u_x + R u + S at one node.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct NodeCoeffs {
    pub diffusion: f64,
    pub advection: f64,
    pub reaction: f64,
    pub source: f64,
}

/// One implicit Euler step as a tridiagonal system
/// `lower[i] u[i-1] + diag[i] u[i] + upper[i] u[i+1] = rhs[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct OperatorStencil {
    pub lower: Vec<f64>,
    pub diag: Vec<f64>,
    pub upper: Vec<f64>,
    pub rhs: Vec<f64>,
    /// Interior nodes where centred advection would break diagonal dominance
    /// and was replaced by upwinding.
    pub upwinded: usize,
}

impl OperatorStencil {
    /// Assembles interior rows from `coeffs` and the previous row. Boundary
    /// rows are left as identity and are overwritten by [`implicit_step`].
    pub fn assemble(dx: f64, dt: f64, coeffs: &[NodeCoeffs], prev: &[f64]) -> Self {
        let n = prev.len();
        debug_assert_eq!(coeffs.len(), n);
        let mut st = OperatorStencil {
            lower: vec![0.0; n],
            diag: vec![1.0; n],
            upper: vec![0.0; n],
            rhs: prev.to_vec(),
            upwinded: 0,
        };
        let idx2 = 1.0 / (dx * dx);
        for i in 1..n - 1 {
            let NodeCoeffs { diffusion: d, advection: b, reaction: r, source: s } = coeffs[i];
            // Centred unless the implicit row would lose diagonal dominance:
            // 1 + Δt(2D/Δx² − R) ≥ Δt|B|/Δx, or |B|Δx ≤ 2D (monotone anyway).
            let centred = b.abs() * dx <= 2.0 * d || 1.0 + dt * (2.0 * d * idx2 - r) >= dt * b.abs() / dx;
            let (lo, up) = if centred {
                (d * idx2 - 0.5 * b / dx, d * idx2 + 0.5 * b / dx)
            } else {
                st.upwinded += 1;
                if b > 0.0 {
                    (d * idx2, d * idx2 + b / dx)
                } else {
                    (d * idx2 - b / dx, d * idx2)
                }
            };
            st.lower[i] = -dt * lo;
            st.upper[i] = -dt * up;
            st.diag[i] = 1.0 + dt * (lo + up - r);
            st.rhs[i] = prev[i] + dt * s;
        }
        st
    }

    /// Worst row margin |diag| − |lower| − |upper| over interior rows.
    pub fn dominance_margin(&self) -> f64 {
        (1..self.diag.len() - 1)
            .map(|i| self.diag[i].abs() - self.lower[i].abs() - self.upper[i].abs())
            .fold(f64::INFINITY, f64::min)
    }
}

/// Boundary closure at one end of the row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary {
    Dirichlet(f64),
    /// Prescribed outward slope u_x, closed with a ghost node.
    Neumann(f64),
}

/// Solves one implicit step with the given closures.
pub fn implicit_step(stencil: &OperatorStencil, dx: f64, left: Boundary, right: Boundary) -> Result<Vec<f64>> {
    let mut st = stencil.clone();
    let n = st.diag.len();
    close(&mut st, dx, 0, left);
    close(&mut st, dx, n - 1, right);
    thomas(&st.lower, &st.diag, &st.upper, &st.rhs)
}

fn close(st: &mut OperatorStencil, dx: f64, i: usize, bc: Boundary) {
    let n = st.diag.len();
    match bc {
        Boundary::Dirichlet(v) => {
            st.lower[i] = 0.0;
            st.upper[i] = 0.0;
            st.diag[i] = 1.0;
            st.rhs[i] = v;
        }
        Boundary::Neumann(slope) => {
            // Row i is assembled as an interior row with the ghost value
            // u[i ± 1] = u[i ∓ 1] ± 2 dx slope folded in.
            if i == 0 {
                let (lo, up) = (st.lower[1], st.upper[1]);
                let ghost_coeff = lo;
                st.diag[0] = st.diag[1];
                st.upper[0] = up + ghost_coeff;
                st.rhs[0] += 2.0 * dx * slope * ghost_coeff;
                st.lower[0] = 0.0;
            } else {
                let (lo, up) = (st.lower[n - 2], st.upper[n - 2]);
                let ghost_coeff = up;
                st.diag[i] = st.diag[n - 2];
                st.lower[i] = lo + ghost_coeff;
                st.rhs[i] -= 2.0 * dx * slope * ghost_coeff;
                st.upper[i] = 0.0;
            }
        }
    }
}

/// Thomas algorithm for a tridiagonal system.
pub fn thomas(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut piv = diag[0];
    if piv.abs() < 1e-300 {
        return Err(Error::SingularSystem { row: 0, pivot: piv });
    }
    c[0] = upper[0] / piv;
    d[0] = rhs[0] / piv;
    for i in 1..n {
        piv = diag[i] - lower[i] * c[i - 1];
        if piv.abs() < 1e-300 || !piv.is_finite() {
            return Err(Error::SingularSystem { row: i, pivot: piv });
        }
        c[i] = upper[i] / piv;
        d[i] = (rhs[i] - lower[i] * d[i - 1]) / piv;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        x[i] -= c[i] * x[i + 1];
    }
    Ok(x)
}

/// Relative residual of a tridiagonal solve, max|Ax − b| / (1 + max|b|).
pub fn tridiagonal_residual(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &[f64], x: &[f64]) -> f64 {
    let n = diag.len();
    let scale = 1.0 + rhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    (0..n)
        .map(|i| {
            let mut ax = diag[i] * x[i];
            if i > 0 {
                ax += lower[i] * x[i - 1];
            }
            if i + 1 < n {
                ax += upper[i] * x[i + 1];
            }
            (ax - rhs[i]).abs()
        })
        .fold(0.0, f64::max)
        / scale
}

/// Penalty sharpness and scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PenaltyParams {
    pub eps: f64,
    pub scale: f64,
}

/// Exponent beyond which the penalty continues linearly; keeps Newton
/// iterates finite after a large overshoot without changing the axioms.
pub const PENALTY_EXPONENT_CAP: f64 = 40.0;

/// C_n α_ε(z) and its derivative, α_ε(z) = −exp(−z/ε).
pub fn penalty(z: f64, p: PenaltyParams) -> (f64, f64) {
    let u = -z / p.eps;
    if u <= PENALTY_EXPONENT_CAP {
        let e = u.exp();
        (-p.scale * e, p.scale * e / p.eps)
    } else {
        let e = PENALTY_EXPONENT_CAP.exp();
        (-p.scale * e * (1.0 + u - PENALTY_EXPONENT_CAP), p.scale * e / p.eps)
    }
}

fn check_interior(field: &ScalarField, i: usize, n: usize) -> Result<()> {
    let g = &field.grid;
    if i == 0 || i + 1 >= g.nx || n >= g.nt {
        return Err(Error::Contract(format!("node ({i}, {n}) is not an interior node")));
    }
    Ok(())
}

/// L v = −v_τ + ½σ² v_xx + (σσ_x + μ) v_x + μ_x v on a reversed-time field,
/// coefficients at forward time T − τ. The time difference is the implicit
/// Euler one (backward in τ; forward at the first row).
pub fn apply_l(field: &ScalarField, instance: &ProblemInstance, i: usize, n: usize) -> Result<f64> {
    if field.axis != TimeAxis::Reversed {
        return Err(Error::Contract("L acts on reversed-time fields".into()));
    }
    check_interior(field, i, n)?;
    let g = &field.grid;
    let (dx, dt) = (g.dx(), g.dt());
    let x = g.x(i);
    let t = g.horizon - g.t(n);
    let u = |ii: usize, nn: usize| field.get(ii, nn);
    let vt = if n > 0 { (u(i, n) - u(i, n - 1)) / dt } else { (u(i, 1) - u(i, 0)) / dt };
    let vx = (u(i + 1, n) - u(i - 1, n)) / (2.0 * dx);
    let vxx = (u(i + 1, n) - 2.0 * u(i, n) + u(i - 1, n)) / (dx * dx);
    let s = instance.volatility.value(x, t);
    let adv = s * instance.volatility.dx(x, t) + instance.drift.value(x, t);
    Ok(-vt + 0.5 * s * s * vxx + adv * vx + instance.drift.dx(x, t) * u(i, n))
}

/// A φ = φ_t + μ φ_x + ½σ² φ_xx on a forward-time field. The time
/// difference looks forward in t (implicit Euler in τ); backward at t = T.
pub fn apply_a(field: &ScalarField, instance: &ProblemInstance, i: usize, n: usize) -> Result<f64> {
    if field.axis != TimeAxis::Forward {
        return Err(Error::Contract("A acts on forward-time fields".into()));
    }
    check_interior(field, i, n)?;
    let g = &field.grid;
    let (dx, dt) = (g.dx(), g.dt());
    let x = g.x(i);
    let t = g.t(n);
    let u = |ii: usize, nn: usize| field.get(ii, nn);
    let pt = if n + 1 < g.nt { (u(i, n + 1) - u(i, n)) / dt } else { (u(i, n) - u(i, n - 1)) / dt };
    let px = (u(i + 1, n) - u(i - 1, n)) / (2.0 * dx);
    let pxx = (u(i + 1, n) - 2.0 * u(i, n) + u(i - 1, n)) / (dx * dx);
    let s = instance.volatility.value(x, t);
    Ok(pt + instance.drift.value(x, t) * px + 0.5 * s * s * pxx)
}
