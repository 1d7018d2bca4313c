//! Uniform space-time grids, fields on them, interpolation and the diagonal
//! extraction of s-indexed families.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Truncated window [x_min, x_max] × [0, T] with an s-grid on [0, T].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub horizon: f64,
    pub nt: usize,
    pub ns: usize,
}

impl SpaceTimeGrid {
    pub fn new(x_min: f64, x_max: f64, nx: usize, horizon: f64, nt: usize, ns: usize) -> Result<Self> {
        let g = SpaceTimeGrid { x_min, x_max, nx, horizon, nt, ns };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_min.is_finite() && self.x_max.is_finite() && self.x_min < self.x_max) {
            return Err(Error::Input(format!(
                "grid window [{}, {}] is empty or not finite",
                self.x_min, self.x_max
            )));
        }
        if self.nx < 3 || self.nt < 2 || self.ns < 2 {
            return Err(Error::Input(format!(
                "grid needs nx ≥ 3, nt ≥ 2, ns ≥ 2 (got {}, {}, {})",
                self.nx, self.nt, self.ns
            )));
        }
        if !(self.horizon.is_finite() && self.horizon > 0.0) {
            return Err(Error::Input(format!("grid horizon must be positive, got {}", self.horizon)));
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.nx - 1) as f64
    }

    pub fn dt(&self) -> f64 {
        self.horizon / (self.nt - 1) as f64
    }

    pub fn ds(&self) -> f64 {
        self.horizon / (self.ns - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        if i + 1 == self.nx {
            self.x_max
        } else {
            self.x_min + i as f64 * self.dx()
        }
    }

    /// Time node n (the same coordinate serves as t or τ).
    pub fn t(&self, n: usize) -> f64 {
        if n + 1 == self.nt {
            self.horizon
        } else {
            n as f64 * self.dt()
        }
    }

    pub fn s(&self, k: usize) -> f64 {
        if k + 1 == self.ns {
            self.horizon
        } else {
            k as f64 * self.ds()
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    /// First forward-time node with t_n ≥ s_k.
    pub fn first_valid_row(&self, k: usize) -> usize {
        let s = self.s(k);
        let r = s / self.dt();
        let n = (r - 1e-9).ceil().max(0.0) as usize;
        n.min(self.nt - 1)
    }

    /// True when every s node coincides with a t node.
    pub fn s_aligned(&self) -> bool {
        (self.nt - 1) % (self.ns - 1) == 0
    }

    /// Same window and horizon with Δx, Δt, Δs halved.
    pub fn refined(&self) -> Self {
        SpaceTimeGrid {
            nx: 2 * self.nx - 1,
            nt: 2 * self.nt - 1,
            ns: 2 * self.ns - 1,
            ..*self
        }
    }

    /// Fractional index of x and whether it is inside the window.
    fn locate(&self, x: f64) -> Option<(usize, f64)> {
        locate_uniform(self.x_min, self.dx(), self.nx, x)
    }
}

fn locate_uniform(lo: f64, h: f64, n: usize, x: f64) -> Option<(usize, f64)> {
    let hi = lo + h * (n - 1) as f64;
    let tol = 1e-12 * (1.0 + hi.abs().max(lo.abs()));
    if !(x >= lo - tol && x <= hi + tol) {
        return None;
    }
    let r = ((x - lo) / h).clamp(0.0, (n - 1) as f64);
    let j = (r.floor() as usize).min(n - 2);
    Some((j, (r - j as f64).clamp(0.0, 1.0)))
}

/// Which time coordinate a field is indexed by.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeAxis {
    /// Physical time t.
    Forward,
    /// τ = T − t.
    Reversed,
}

/// Values on all (x, time) nodes, stored row by row in time.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub grid: SpaceTimeGrid,
    pub axis: TimeAxis,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: SpaceTimeGrid, axis: TimeAxis) -> Self {
        ScalarField { grid, axis, values: vec![0.0; grid.nx * grid.nt] }
    }

    pub fn from_fn(grid: SpaceTimeGrid, axis: TimeAxis, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut out = Self::zeros(grid, axis);
        for n in 0..grid.nt {
            let t = grid.t(n);
            for i in 0..grid.nx {
                out.values[n * grid.nx + i] = f(grid.x(i), t);
            }
        }
        out
    }

    pub fn from_rows(grid: SpaceTimeGrid, axis: TimeAxis, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != grid.nt || rows.iter().any(|r| r.len() != grid.nx) {
            return Err(Error::Contract("row layout does not match the grid".into()));
        }
        Ok(ScalarField { grid, axis, values: rows.concat() })
    }

    pub fn get(&self, i: usize, n: usize) -> f64 {
        self.values[n * self.grid.nx + i]
    }

    pub fn set(&mut self, i: usize, n: usize, v: f64) {
        self.values[n * self.grid.nx + i] = v;
    }

    pub fn row(&self, n: usize) -> &[f64] {
        let nx = self.grid.nx;
        &self.values[n * nx..(n + 1) * nx]
    }

    pub fn row_mut(&mut self, n: usize) -> &mut [f64] {
        let nx = self.grid.nx;
        &mut self.values[n * nx..(n + 1) * nx]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Same values re-indexed by the other time coordinate.
    pub fn flipped(&self) -> Self {
        let nt = self.grid.nt;
        let mut out = ScalarField::zeros(
            self.grid,
            match self.axis {
                TimeAxis::Forward => TimeAxis::Reversed,
                TimeAxis::Reversed => TimeAxis::Forward,
            },
        );
        for n in 0..nt {
            out.row_mut(nt - 1 - n).copy_from_slice(self.row(n));
        }
        out
    }

    pub fn to_forward(&self) -> Self {
        match self.axis {
            TimeAxis::Forward => self.clone(),
            TimeAxis::Reversed => self.flipped(),
        }
    }

    pub fn to_reversed(&self) -> Self {
        match self.axis {
            TimeAxis::Reversed => self.clone(),
            TimeAxis::Forward => self.flipped(),
        }
    }

    pub fn max_abs_diff(&self, other: &ScalarField) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        ScalarField { grid: self.grid, axis: self.axis, values: self.values.iter().map(|&v| f(v)).collect() }
    }

    /// Bilinear interpolation at (x, t), with t in physical (forward) time.
    pub fn interp2(&self, x: f64, t: f64) -> Result<f64> {
        let g = &self.grid;
        let coord = match self.axis {
            TimeAxis::Forward => t,
            TimeAxis::Reversed => g.horizon - t,
        };
        let (i, wx) = g.locate(x).ok_or(Error::Range { what: "x", value: x, lo: g.x_min, hi: g.x_max })?;
        let (n, wt) = locate_uniform(0.0, g.dt(), g.nt, coord)
            .ok_or(Error::Range { what: "t", value: t, lo: 0.0, hi: g.horizon })?;
        let f = |ii, nn| self.get(ii, nn);
        let lo = (1.0 - wx) * f(i, n) + wx * f(i + 1, n);
        let hi = (1.0 - wx) * f(i, n + 1) + wx * f(i + 1, n + 1);
        Ok((1.0 - wt) * lo + wt * hi)
    }

    /// CSV with header `x,t,value`, rows ordered by increasing physical time.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,t,value")?;
        let fwd = self.to_forward();
        let g = &self.grid;
        for n in 0..g.nt {
            let t = g.t(n);
            for (i, v) in fwd.row(n).iter().enumerate() {
                writeln!(w, "{},{},{}", g.x(i), t, v)?;
            }
        }
        Ok(())
    }

    /// Reads a CSV written by [`ScalarField::write_csv`] back onto `grid`.
    pub fn read_csv<R: BufRead>(grid: SpaceTimeGrid, r: R) -> Result<Self> {
        let values = read_value_column(r, "x,t,value", grid.nx * grid.nt)?;
        Ok(ScalarField { grid, axis: TimeAxis::Forward, values })
    }
}

/// Last column of a CSV with the given header, checked against a row count.
fn read_value_column<R: BufRead>(r: R, expected_header: &str, count: usize) -> Result<Vec<f64>> {
    let mut lines = r.lines();
    let header = lines.next().transpose()?.unwrap_or_default();
    if header.trim() != expected_header {
        return Err(Error::Input(format!("unexpected CSV header `{header}`, expected `{expected_header}`")));
    }
    let mut values = Vec::with_capacity(count);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let v = line
            .rsplit(',')
            .next()
            .and_then(|s| s.trim().parse::<f64>().ok())
            .ok_or_else(|| Error::Input(format!("malformed CSV row `{line}`")))?;
        values.push(v);
    }
    if values.len() != count {
        return Err(Error::Input(format!("CSV holds {} values, grid needs {count}", values.len())));
    }
    Ok(values)
}

/// Free boundary Γ, one location per node of the reversed time axis.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FreeBoundary {
    pub grid: SpaceTimeGrid,
    /// Γ at τ_n = n Δt.
    pub values: Vec<f64>,
    /// Rows where no crossing was found inside the window.
    pub truncated_rows: Vec<usize>,
}

impl FreeBoundary {
    /// Γ at reversed time τ by linear interpolation.
    pub fn at_reversed(&self, tau: f64) -> f64 {
        let g = &self.grid;
        let r = (tau / g.dt()).clamp(0.0, (g.nt - 1) as f64);
        let n = (r.floor() as usize).min(g.nt - 2);
        let w = r - n as f64;
        (1.0 - w) * self.values[n] + w * self.values[n + 1]
    }

    /// Γ_fwd(t) = Γ(T − t).
    pub fn at_forward(&self, t: f64) -> f64 {
        self.at_reversed(self.grid.horizon - t)
    }

    pub fn max_jump(&self) -> f64 {
        self.values.windows(2).map(|w| (w[1] - w[0]).abs()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &FreeBoundary) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// CSV `t,value` in increasing physical time.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,value")?;
        let g = &self.grid;
        for n in 0..g.nt {
            writeln!(w, "{},{}", g.t(n), self.values[g.nt - 1 - n])?;
        }
        Ok(())
    }

    /// Reads a CSV written by [`FreeBoundary::write_csv`]. Rows pinned at
    /// x_max are marked truncated.
    pub fn read_csv<R: BufRead>(grid: SpaceTimeGrid, r: R) -> Result<Self> {
        let mut values = read_value_column(r, "t,value", grid.nt)?;
        values.reverse();
        let truncated_rows = (0..grid.nt).filter(|&m| values[m] >= grid.x_max).collect();
        Ok(FreeBoundary { grid, values, truncated_rows })
    }
}

/// s-indexed family on the grid; slice k lives on forward rows n with t_n ≥ s_k.
#[derive(Debug, Clone, PartialEq)]
pub struct FamilyField {
    pub grid: SpaceTimeGrid,
    slices: Vec<Vec<f64>>,
}

impl FamilyField {
    /// Builds a family from per-slice rows in forward time, starting at
    /// `grid.first_valid_row(k)`.
    pub fn from_slices(grid: SpaceTimeGrid, slices: Vec<Vec<f64>>) -> Result<Self> {
        if slices.len() != grid.ns {
            return Err(Error::Contract(format!("expected {} slices, got {}", grid.ns, slices.len())));
        }
        for (k, s) in slices.iter().enumerate() {
            let rows = grid.nt - grid.first_valid_row(k);
            if s.len() != rows * grid.nx {
                return Err(Error::Contract(format!("slice {k} has {} values, expected {}", s.len(), rows * grid.nx)));
            }
        }
        Ok(FamilyField { grid, slices })
    }

    pub fn from_fn(grid: SpaceTimeGrid, f: impl Fn(f64, f64, f64) -> f64) -> Self {
        let slices = (0..grid.ns)
            .map(|k| {
                let s = grid.s(k);
                let n0 = grid.first_valid_row(k);
                let mut v = Vec::with_capacity((grid.nt - n0) * grid.nx);
                for n in n0..grid.nt {
                    for i in 0..grid.nx {
                        v.push(f(grid.x(i), grid.t(n), s));
                    }
                }
                v
            })
            .collect();
        FamilyField { grid, slices }
    }

    /// Value at (x_i, t_n, s_k); `None` when t_n < s_k.
    pub fn get(&self, i: usize, n: usize, k: usize) -> Option<f64> {
        let n0 = self.grid.first_valid_row(k);
        if n < n0 {
            return None;
        }
        Some(self.slices[k][(n - n0) * self.grid.nx + i])
    }

    /// Row t_n of slice k.
    pub fn row(&self, n: usize, k: usize) -> Option<&[f64]> {
        let n0 = self.grid.first_valid_row(k);
        if n < n0 {
            return None;
        }
        let nx = self.grid.nx;
        let a = (n - n0) * nx;
        Some(&self.slices[k][a..a + nx])
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        &self.slices[k]
    }

    pub fn is_finite(&self) -> bool {
        self.slices.iter().flatten().all(|v| v.is_finite())
    }

    /// CSV with header `x,t,s,value`, ordered by t, then s, then x.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "x,t,s,value")?;
        let g = &self.grid;
        for n in 0..g.nt {
            let t = g.t(n);
            for k in 0..g.ns {
                if let Some(row) = self.row(n, k) {
                    let s = g.s(k);
                    for (i, v) in row.iter().enumerate() {
                        writeln!(w, "{},{},{},{}", g.x(i), t, s, v)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Reads a CSV written by [`FamilyField::write_csv`] back onto `grid`.
    pub fn read_csv<R: BufRead>(grid: SpaceTimeGrid, r: R) -> Result<Self> {
        let rows: usize = (0..grid.ns).map(|k| grid.nt - grid.first_valid_row(k)).sum();
        let values = read_value_column(r, "x,t,s,value", rows * grid.nx)?;
        let mut slices: Vec<Vec<f64>> = (0..grid.ns)
            .map(|k| Vec::with_capacity((grid.nt - grid.first_valid_row(k)) * grid.nx))
            .collect();
        let mut it = values.chunks(grid.nx);
        for n in 0..grid.nt {
            for (k, slice) in slices.iter_mut().enumerate() {
                if n >= grid.first_valid_row(k) {
                    slice.extend_from_slice(it.next().expect("row count checked"));
                }
            }
        }
        FamilyField::from_slices(grid, slices)
    }

    /// f^{s_k}(x, t), linear in x and t; `t` must lie on rows of slice k.
    pub fn interp_slice(&self, k: usize, x: f64, t: f64) -> Result<f64> {
        let g = &self.grid;
        if k >= g.ns {
            return Err(Error::Input(format!("slice {k} out of range (ns = {})", g.ns)));
        }
        let n0 = g.first_valid_row(k);
        let t_err = Error::Range { what: "t", value: t, lo: g.t(n0), hi: g.horizon };
        let (i, wx) = g.locate(x).ok_or(Error::Range { what: "x", value: x, lo: g.x_min, hi: g.x_max })?;
        let at_row = |n: usize| {
            let row = self.row(n, k).expect("row is valid");
            (1.0 - wx) * row[i] + wx * row[i + 1]
        };
        if n0 + 1 == g.nt {
            return if (t - g.horizon).abs() <= 1e-12 * (1.0 + g.horizon) { Ok(at_row(n0)) } else { Err(t_err) };
        }
        let (j, wt) = locate_uniform(g.t(n0), g.dt(), g.nt - n0, t).ok_or(t_err)?;
        Ok((1.0 - wt) * at_row(n0 + j) + wt * at_row(n0 + j + 1))
    }
}

/// d(x, t) = q(x, t, s = t) on the forward grid.
///
/// Exact where an s node sits on t; otherwise linear in s through the two
/// largest s nodes not exceeding t.
pub fn diag_extract(family: &FamilyField) -> Result<ScalarField> {
    let g = family.grid;
    let mut out = ScalarField::zeros(g, TimeAxis::Forward);
    let tol = 1e-9 * g.dt();
    for n in 0..g.nt {
        let t = g.t(n);
        // largest k with s_k ≤ t
        let mut k_hi = None;
        for k in (0..g.ns).rev() {
            if g.s(k) <= t + tol {
                k_hi = Some(k);
                break;
            }
        }
        let k2 = k_hi.ok_or_else(|| Error::Resolution(format!("no s node at or below t = {t}")))?;
        let s2 = g.s(k2);
        let row2 = family.row(n, k2).ok_or_else(|| Error::Resolution(format!("slice {k2} undefined at t = {t}")))?;
        if (t - s2).abs() <= tol {
            out.row_mut(n).copy_from_slice(row2);
            continue;
        }
        if k2 == 0 {
            // Only slice 0 exists here: add the diagonal correction
            // q(·, t₁, s₁) − q(·, t₁, s₀), interpolated linearly in t from 0
            // at s₀ to its value at the first row t₁ of slice 1.
            if g.ns < 3 {
                return Err(Error::Resolution(format!(
                    "t = {t} lies inside the single s cell; use at least three s nodes"
                )));
            }
            let n1 = g.first_valid_row(1);
            let t1 = g.t(n1);
            let a = family.row(n1, 1).expect("slice 1 is valid from its first row");
            let b = family.row(n1, 0).expect("slice 0 is valid everywhere");
            let w = (t - s2) / (t1 - s2);
            for (i, o) in out.row_mut(n).iter_mut().enumerate() {
                *o = row2[i] + w * (a[i] - b[i]);
            }
            continue;
        }
        let k1 = k2 - 1;
        let s1 = g.s(k1);
        let row1 = family.row(n, k1).expect("smaller s is valid wherever a larger one is");
        let w = (t - s2) / (s2 - s1);
        for (i, o) in out.row_mut(n).iter_mut().enumerate() {
            *o = row2[i] + w * (row2[i] - row1[i]);
        }
    }
    Ok(out)
}
