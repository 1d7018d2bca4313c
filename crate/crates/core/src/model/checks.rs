use serde::Serialize;

use super::{
    effective_terminal, Cost, Drift, ExposureRate, ProblemInstance, TerminalLoss, Volatility,
};
use crate::error::{Error, Result};
use crate::grid::SpaceTimeGrid;

/// One evaluated inequality. `margin` is the slack in the direction of the
/// inequality (negative means violated).
#[derive(Debug, Clone, Serialize)]
pub struct CheckItem {
    pub block: String,
    pub name: String,
    pub margin: f64,
    pub strict: bool,
    pub pass: bool,
    /// Worst probe node (x, τ) for grid checks.
    pub worst_at: Option<(f64, f64)>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct AssumptionReport {
    pub items: Vec<CheckItem>,
}

impl AssumptionReport {
    fn push(&mut self, block: &str, name: &str, margin: f64, strict: bool, worst_at: Option<(f64, f64)>) {
        let pass = if strict { margin > 0.0 } else { margin >= 0.0 };
        self.items.push(CheckItem {
            block: block.to_string(),
            name: name.to_string(),
            margin,
            strict,
            pass,
            worst_at,
        });
    }

    pub fn all_pass(&self) -> bool {
        self.items.iter().all(|i| i.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckItem> {
        self.items.iter().filter(|i| !i.pass)
    }

    pub fn find(&self, name: &str) -> Option<&CheckItem> {
        self.items.iter().find(|i| i.name == name)
    }

    /// Plain-text table, one line per inequality.
    pub fn table(&self) -> String {
        let mut out = String::new();
        for i in &self.items {
            let at = match i.worst_at {
                Some((x, t)) => format!("  at x={x:.4}, t={t:.4}"),
                None => String::new(),
            };
            out.push_str(&format!(
                "{:4} [{:>8}] {:<60} margin {:+.6e}{}\n",
                if i.pass { "ok" } else { "FAIL" },
                i.block,
                i.name,
                i.margin,
                at
            ));
        }
        out
    }
}

/// Parameters of the mean-reverting exposure family with exponential losses.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleParams {
    pub b: f64,
    pub a: f64,
    pub sigma: f64,
    pub c_f: f64,
    pub psi_f: f64,
    pub c_h: f64,
    pub psi_h: ExposureRate,
    pub c: f64,
    pub x0: f64,
    pub kappa_rate: f64,
    pub c_kappa: f64,
    pub horizon: f64,
    pub discount: super::Discount,
}

impl ExampleParams {
    pub fn from_instance(instance: &ProblemInstance) -> Result<Self> {
        let Drift::MeanReverting { b, a } = instance.drift;
        let Volatility::Constant { sigma } = instance.volatility;
        let Cost::Constant { c } = instance.cost;
        let TerminalLoss::Exponential { scale: c_f, exponent: psi_f } = instance.terminal_loss else {
            return Err(Error::Input("the example family needs an exponential terminal loss".into()));
        };
        Ok(ExampleParams {
            b,
            a,
            sigma,
            c_f,
            psi_f,
            c_h: instance.running_loss.scale,
            psi_h: instance.running_loss.exponent,
            c,
            x0: instance.running_loss.x0,
            kappa_rate: instance.kappa.rate,
            c_kappa: instance.kappa.c_kappa,
            horizon: instance.horizon,
            discount: instance.discount,
        })
    }

    fn scalars(&self) -> Vec<(&'static str, f64)> {
        let mut v = vec![
            ("b", self.b),
            ("a", self.a),
            ("sigma", self.sigma),
            ("C_F", self.c_f),
            ("Psi_F", self.psi_f),
            ("C_H", self.c_h),
            ("c", self.c),
            ("x0", self.x0),
            ("kappa rate", self.kappa_rate),
            ("C_kappa", self.c_kappa),
            ("T", self.horizon),
        ];
        match self.psi_h {
            ExposureRate::Constant { psi } => v.push(("Psi_H", psi)),
            ExposureRate::Exponential { psi0, rate } | ExposureRate::Linear { psi0, slope: rate } => {
                v.push(("Psi_H(0)", psi0));
                v.push(("Psi_H rate", rate));
            }
        }
        v
    }
}

const T_SAMPLES: usize = 2001;

fn time_samples(horizon: f64) -> impl Iterator<Item = f64> {
    (0..T_SAMPLES).map(move |i| horizon * i as f64 / (T_SAMPLES - 1) as f64)
}

fn min_over<F: Fn(f64) -> f64>(horizon: f64, f: F) -> f64 {
    time_samples(horizon).map(f).fold(f64::INFINITY, f64::min)
}

fn max_over<F: Fn(f64) -> f64>(horizon: f64, f: F) -> f64 {
    time_samples(horizon).map(f).fold(f64::NEG_INFINITY, f64::max)
}

/// Evaluates the explicit sufficient conditions of the exponential example
/// family, block by block, in the order they are stated.
pub fn check_remark_example(p: &ExampleParams) -> Result<AssumptionReport> {
    for (name, v) in p.scalars() {
        if !v.is_finite() {
            return Err(Error::Input(format!("parameter {name} is not finite ({v})")));
        }
    }
    let ExampleParams { b, a, sigma, c_f, psi_f, c_h, c, x0, kappa_rate: kb, c_kappa, horizon: t_end, .. } = *p;
    let psi = |t: f64| p.psi_h.value(t);
    let dpsi = |t: f64| p.psi_h.derivative(t);
    let mut r = AssumptionReport::default();

    let blk = "first";
    r.push(blk, "b > 0", b, true, None);
    r.push(blk, "σ > 0", sigma, true, None);
    r.push(blk, "C_F > 0", c_f, true, None);
    r.push(blk, "C_H > 0", c_h, true, None);
    r.push(blk, "Ψ_F > max{1, 1/b}", psi_f - 1f64.max(1.0 / b), true, None);
    let a_lo = (b + 0.5 * sigma * sigma).max(1.0);
    let a_hi = b * psi_f + 0.5 * sigma * sigma * psi_f * psi_f;
    r.push(blk, "a ∈ (max{b + σ²/2, 1}, bΨ_F + σ²Ψ_F²/2) lower end", a - a_lo, true, None);
    r.push(blk, "a ∈ (max{b + σ²/2, 1}, bΨ_F + σ²Ψ_F²/2) upper end", a_hi - a, true, None);
    r.push(blk, "κ̄ > a", kb - a, true, None);
    r.push(blk, "C_κ > 0", c_kappa, true, None);
    r.push(blk, "C_κ < Ψ_F e^{−(κ̄+a)T}", psi_f * (-(kb + a) * t_end).exp() - c_kappa, true, None);

    let blk = "second";
    let psi_min = min_over(t_end, psi);
    let psi_max = max_over(t_end, psi);
    r.push(blk, "min Ψ_H > C_κ e^{κ̄T}", psi_min - c_kappa * (kb * t_end).exp(), true, None);
    r.push(blk, "max Ψ_H < Ψ_F", psi_f - psi_max, true, None);
    let growth = min_over(t_end, |t| dpsi(t) / psi(t));
    r.push(blk, "min Ψ_H′/Ψ_H > a", growth - a, true, None);

    let blk = "third";
    r.push(blk, "κ̄ > max Ψ_H", kb - psi_max, true, None);
    r.push(blk, "κ̄ < Ψ_F", psi_f - kb, true, None);
    // Both placements of κ̄ must be satisfiable at once.
    r.push(
        blk,
        "κ̄ placements compatible: max{a, max Ψ_H} < Ψ_F",
        psi_f - a.max(psi_max),
        true,
        None,
    );
    let k_bound = min_over(t_end, |t| {
        let (s, ds) = (psi(t), dpsi(t));
        (-2.0 * ds / s - 0.5 * sigma * sigma * s * s - b * s + 2.0 * a) / (ds - a * s)
    });
    r.push(blk, "c > 0", c, true, None);
    r.push(blk, "c < C_F Ψ_F e^{Ψ_F K}", c_f * psi_f * (psi_f * k_bound).exp() - c, true, None);

    let blk = "fourth";
    let x_star = (c / (c_f * psi_f)).ln() / psi_f;
    r.push(blk, "x₀ > ln(c/(C_F Ψ_F))/Ψ_F", x0 - x_star, true, None);
    let x0_hi = ((a * c / (c_f * psi_f)).ln() / psi_f).min(k_bound);
    r.push(blk, "x₀ < min{ln(ac/(C_F Ψ_F))/Ψ_F, K}", x0_hi - x0, true, None);

    let blk = "fifth";
    let rho0 = -p.discount.derivative(0.0);
    let cap1 = min_over(t_end, |t| {
        let s = psi(t);
        c_h * s * s / (c * psi_f) * (c / (c_f * psi_f)).powf(s / psi_f)
    });
    r.push(blk, "−β′(0) ≤ min C_H Ψ_H²/(cΨ_F) (c/(C_F Ψ_F))^{Ψ_H/Ψ_F}", cap1 - rho0, false, None);
    let cap2 = min_over(t_end, |t| {
        let (s, ds) = (psi(t), dpsi(t));
        -2.0 * ds / s - (ds - a * s) * x0 - 0.5 * sigma * sigma * s * s - b * s + 2.0 * a
    });
    r.push(blk, "−β′(0) ≤ min{−2Ψ_H′/Ψ_H − (Ψ_H′ − aΨ_H)x₀ − σ²Ψ_H²/2 − bΨ_H + 2a}", cap2 - rho0, false, None);
    let log_slope = min_over(t_end, |t| {
        let (v, d) = p.discount.eval(t);
        d / v
    });
    let cap3 = max_over(t_end, |t| c_h * psi(t) / c * (psi(t) * x0).exp()) - a;
    r.push(blk, "min β′/β ≥ max{C_H Ψ_H e^{Ψ_H x₀}/c} − a", log_slope - cap3, false, None);
    Ok(r)
}

/// A documented single-parameter change that breaks one named inequality
/// of the example family.
#[derive(Debug, Clone, Copy)]
pub struct Mutation {
    pub name: &'static str,
    pub description: &'static str,
    /// Name of the inequality that must be reported as failing.
    pub expected: &'static str,
    edit: fn(&mut ProblemInstance),
}

impl Mutation {
    pub fn apply(&self, instance: &ProblemInstance) -> ProblemInstance {
        let mut out = instance.clone();
        (self.edit)(&mut out);
        out
    }

    /// Runs the example-family checker on the mutated instance and returns
    /// the names of the failing inequalities.
    pub fn failures(&self, instance: &ProblemInstance) -> Result<Vec<String>> {
        let rep = check_remark_example(&ExampleParams::from_instance(&self.apply(instance))?)?;
        Ok(rep.failures().map(|i| i.name.clone()).collect())
    }
}

pub fn documented_mutations() -> [Mutation; 3] {
    [
        Mutation {
            name: "small-terminal-exponent",
            description: "terminal exponent Ψ_F = 0.5",
            expected: "Ψ_F > max{1, 1/b}",
            edit: |i| {
                if let TerminalLoss::Exponential { exponent, .. } = &mut i.terminal_loss {
                    *exponent = 0.5;
                }
            },
        },
        Mutation {
            name: "weak-mean-reversion",
            description: "mean-reversion speed a = 0.2",
            expected: "a ∈ (max{b + σ²/2, 1}, bΨ_F + σ²Ψ_F²/2) lower end",
            edit: |i| {
                let Drift::MeanReverting { a, .. } = &mut i.drift;
                *a = 0.2;
            },
        },
        Mutation {
            name: "steep-discount",
            description: "hyperbolic discount with k = 5",
            expected: "−β′(0) ≤ min C_H Ψ_H²/(cΨ_F) (c/(C_F Ψ_F))^{Ψ_H/Ψ_F}",
            edit: |i| i.discount = super::Discount::Hyperbolic { k: 5.0 },
        },
    ]
}

/// Sampled worst margin of one pointwise inequality.
struct Worst {
    margin: f64,
    at: Option<(f64, f64)>,
}

impl Worst {
    fn new() -> Self {
        Worst { margin: f64::INFINITY, at: None }
    }

    fn see(&mut self, m: f64, x: f64, tau: f64) {
        if m < self.margin || self.at.is_none() {
            self.margin = m;
            self.at = Some((x, tau));
        }
    }
}

/// Evaluates the pointwise inequalities of the standing assumptions at every
/// probe node (x, τ) with τ the reversed time; coefficients are taken at the
/// forward time T − τ.
pub fn check_assumption_grid(instance: &ProblemInstance, probe: &SpaceTimeGrid) -> AssumptionReport {
    let names: [(&str, &str, bool); 20] = [
        ("c134", "σ > 0", true),
        ("c134", "μ_x ≤ 0", false),
        ("c134", "μ_xx ≥ 0", false),
        ("c134", "μ_xxx ≥ 0", false),
        ("c2", "−β′(0) F̃″ ≥ 0", false),
        ("c2", "−β′(0) F̃″ ≤ H_xx", false),
        ("t1", "c′ ≤ 0", false),
        ("t1", "σ_t ≤ 0", false),
        ("t1", "μ_xt ≤ 0", false),
        ("t2", "σσ_xt + σ_tσ_x + μ_t ≤ 0", false),
        ("c5", "σσ_xx + σ_x² + 2μ_x ≤ 0", false),
        ("c6", "max(−β′/β) c + c′ + μ_x c ≤ −H_x", false),
        ("c6", "−H_x < β′(0) F̃′", true),
        ("c6", "β′(0) F̃′ ≤ 0", false),
        ("c6", "L F̃′ ≥ 0", false),
        ("c7", "L(H_x) ≤ β′(0) H_x", false),
        ("c8", "∂_x L(H_x) ≤ β′(0) H_xx", false),
        ("c9", "M L(κ) ≤ −H_x for x ≤ −1", false),
        ("c10", "F̃′ ≤ M κ for x ≤ −1", false),
        ("decay", "H, H_xx, F → 0 at the left edge", false),
    ];
    let mut worst: Vec<Worst> = names.iter().map(|_| Worst::new()).collect();
    let t_end = instance.horizon;
    let term = match effective_terminal(instance) {
        Ok(t) => t,
        Err(_) => {
            let mut r = AssumptionReport::default();
            r.push("terminal", "finite terminal purchase", -1.0, false, None);
            return r;
        }
    };
    let (_, db0) = instance.discount.eval(0.0);
    let mu = &instance.drift;
    let vol = &instance.volatility;
    let m_bound = instance.bound_m;

    // max_{u ∈ [0, t]} of −β′/β, accumulated along a fine forward grid.
    let neg_log_slope = |t: f64| {
        let (v, d) = instance.discount.eval(t);
        -d / v
    };
    let running_max = |t: f64| {
        let n = 200;
        (0..=n)
            .map(|i| neg_log_slope(t * i as f64 / n as f64))
            .fold(f64::NEG_INFINITY, f64::max)
    };

    for n in 0..probe.nt {
        let tau = probe.t(n);
        let t = t_end - tau;
        let rho = running_max(t);
        for i in 0..probe.nx {
            let x = probe.x(i);
            let s = vol.value(x, t);
            let (sx, sxx, st, sxt) = (vol.dx(x, t), vol.dxx(x, t), vol.dt(x, t), vol.dxt(x, t));
            let (m0, mx, mxx, mxxx, mt, mxt) =
                (mu.value(x, t), mu.dx(x, t), mu.dxx(x, t), mu.dxxx(x, t), mu.dt(x, t), mu.dxt(x, t));
            let c = instance.cost.value(t);
            let cp = instance.cost.dt(t);
            let h = instance.running_loss.jet(x, t);
            let (f1, f2) = (term.slope(x), term.curvature(x));
            let f3 = if x <= term.threshold {
                third_derivative(&instance.terminal_loss, x)
            } else {
                0.0
            };
            let adv = s * sx + m0;
            let mut k = 0;
            let mut see = |m: f64| {
                worst[k].see(m, x, tau);
                k += 1;
            };
            see(s);
            see(-mx);
            see(mxx);
            see(mxxx);
            see(-db0 * f2);
            see(h.dxx + db0 * f2);
            see(-cp);
            see(-st);
            see(-mxt);
            see(-(s * sxt + st * sx + mt));
            see(-(s * sxx + sx * sx + 2.0 * mx));
            see(-h.dx - (rho * c + cp + mx * c));
            see(db0 * f1 + h.dx);
            see(-db0 * f1);
            see(0.5 * s * s * f3 + adv * f2 + mx * f1);
            // L(φ) with φ(x, τ) = H_x(x, T − τ): −φ_τ = H_xt.
            let l_hx = h.dxt + 0.5 * s * s * h.dxxx + adv * h.dxx + mx * h.dx;
            see(db0 * h.dx - l_hx);
            let adv_x = sx * sx + s * sxx + mx;
            let dl_hx = h.dxxt + s * sx * h.dxxx + 0.5 * s * s * h.dxxxx + adv * h.dxxx + adv_x * h.dxx
                + mxx * h.dx
                + mx * h.dxx;
            see(db0 * h.dxx - dl_hx);
            if x <= -1.0 {
                let (kv, kx, kxx, kt) = instance.kappa.jet(x, t);
                let l_kappa = kt + 0.5 * s * s * kxx + adv * kx + mx * kv;
                see(-h.dx - m_bound * l_kappa);
                see(m_bound * kv - f1);
            }
            if i == 0 {
                let tail = h.value.max(h.dxx.abs()).max(instance.terminal_loss.value(x));
                worst[19].see(LEFT_EDGE_TOL - tail, x, tau);
            }
        }
    }
    let mut r = AssumptionReport::default();
    for ((block, name, strict), w) in names.iter().zip(worst) {
        if w.at.is_none() && w.margin.is_infinite() {
            // inequality restricted to a sub-window that the probe does not reach
            continue;
        }
        r.push(block, name, w.margin, *strict, w.at);
    }
    // Unbounded marginal terminal loss is a property of the family.
    let growth = match instance.terminal_loss {
        TerminalLoss::Exponential { .. } | TerminalLoss::Quadratic { .. } => 0.0,
        TerminalLoss::Softplus { .. } => -1.0,
    };
    r.push("decay", "F′(x) → +∞", growth, false, None);
    r
}

/// Left-edge threshold for the asymptotic decay conditions.
pub const LEFT_EDGE_TOL: f64 = 1e-6;

fn third_derivative(loss: &TerminalLoss, x: f64) -> f64 {
    match *loss {
        TerminalLoss::Exponential { scale, exponent } => scale * exponent.powi(3) * (exponent * x).exp(),
        TerminalLoss::Quadratic { .. } => 0.0,
        TerminalLoss::Softplus { .. } => {
            let h = 1e-4;
            (loss.dxx(x + h) - loss.dxx(x - h)) / (2.0 * h)
        }
    }
}
