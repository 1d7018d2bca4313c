//! Closed registry of coefficient families.
//!
//! Every family carries its value together with the analytic partial
//! derivatives the operators and the assumption checker consume. Time
//! arguments are physical (forward) time.

use serde::{Deserialize, Serialize};

/// State drift μ(x, t).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Drift {
    /// μ(x, t) = b − a·x.
    MeanReverting { b: f64, a: f64 },
}

impl Drift {
    pub fn value(&self, x: f64, _t: f64) -> f64 {
        match *self {
            Drift::MeanReverting { b, a } => b - a * x,
        }
    }

    pub fn dx(&self, _x: f64, _t: f64) -> f64 {
        match *self {
            Drift::MeanReverting { a, .. } => -a,
        }
    }

    pub fn dxx(&self, _x: f64, _t: f64) -> f64 {
        0.0
    }

    pub fn dxxx(&self, _x: f64, _t: f64) -> f64 {
        0.0
    }

    pub fn dt(&self, _x: f64, _t: f64) -> f64 {
        0.0
    }

    pub fn dxt(&self, _x: f64, _t: f64) -> f64 {
        0.0
    }
}

/// Diffusion coefficient σ(x, t).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Volatility {
    Constant { sigma: f64 },
}

impl Volatility {
    pub fn value(&self, _x: f64, _t: f64) -> f64 {
        match *self {
            Volatility::Constant { sigma } => sigma,
        }
    }

    pub fn dx(&self, _x: f64, _t: f64) -> f64 {
        0.0
    }

    pub fn dxx(&self, _x: f64, _t: f64) -> f64 {
        0.0
    }

    pub fn dt(&self, _x: f64, _t: f64) -> f64 {
        0.0
    }

    pub fn dxt(&self, _x: f64, _t: f64) -> f64 {
        0.0
    }
}

/// Time-dependent exponent Ψ_H(t) of the running loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExposureRate {
    Constant { psi: f64 },
    /// Ψ(t) = psi0·exp(rate·t).
    Exponential { psi0: f64, rate: f64 },
    /// Ψ(t) = psi0 + slope·t.
    Linear { psi0: f64, slope: f64 },
}

impl ExposureRate {
    pub fn value(&self, t: f64) -> f64 {
        match *self {
            ExposureRate::Constant { psi } => psi,
            ExposureRate::Exponential { psi0, rate } => psi0 * (rate * t).exp(),
            ExposureRate::Linear { psi0, slope } => psi0 + slope * t,
        }
    }

    pub fn derivative(&self, t: f64) -> f64 {
        match *self {
            ExposureRate::Constant { .. } => 0.0,
            ExposureRate::Exponential { psi0, rate } => psi0 * rate * (rate * t).exp(),
            ExposureRate::Linear { slope, .. } => slope,
        }
    }
}

/// Running loss H(x, t) = C_H·exp(Ψ_H(t)·x) for x ≤ x₀, continued linearly
/// above x₀ with value and slope matched (H is C¹, H_xx jumps at x₀).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunningLoss {
    pub scale: f64,
    pub exponent: ExposureRate,
    /// Continuation point; `inf` gives a pure exponential.
    pub x0: f64,
}

/// Partial derivatives of H at one point; `t`-derivatives are in forward time.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunningLossJet {
    pub value: f64,
    pub dx: f64,
    pub dxx: f64,
    pub dxxx: f64,
    pub dxxxx: f64,
    pub dt: f64,
    pub dxt: f64,
    pub dxxt: f64,
}

impl RunningLoss {
    pub fn jet(&self, x: f64, t: f64) -> RunningLossJet {
        let psi = self.exponent.value(t);
        let dpsi = self.exponent.derivative(t);
        if x <= self.x0 {
            let h = self.scale * (psi * x).exp();
            RunningLossJet {
                value: h,
                dx: psi * h,
                dxx: psi * psi * h,
                dxxx: psi.powi(3) * h,
                dxxxx: psi.powi(4) * h,
                dt: dpsi * x * h,
                dxt: dpsi * h * (1.0 + psi * x),
                dxxt: psi * dpsi * h * (2.0 + psi * x),
            }
        } else {
            let x0 = self.x0;
            let h0 = self.scale * (psi * x0).exp();
            let h1 = psi * h0;
            let dh0 = dpsi * x0 * h0;
            let dh1 = dpsi * h0 * (1.0 + psi * x0);
            RunningLossJet {
                value: h0 + h1 * (x - x0),
                dx: h1,
                dt: dh0 + dh1 * (x - x0),
                dxt: dh1,
                ..Default::default()
            }
        }
    }

    pub fn value(&self, x: f64, t: f64) -> f64 {
        let psi = self.exponent.value(t);
        if x <= self.x0 {
            self.scale * (psi * x).exp()
        } else {
            let h0 = self.scale * (psi * self.x0).exp();
            h0 * (1.0 + psi * (x - self.x0))
        }
    }

    pub fn dx(&self, x: f64, t: f64) -> f64 {
        let psi = self.exponent.value(t);
        psi * self.scale * (psi * x.min(self.x0)).exp()
    }

    pub fn dxx(&self, x: f64, t: f64) -> f64 {
        if x <= self.x0 {
            let psi = self.exponent.value(t);
            psi * psi * self.scale * (psi * x).exp()
        } else {
            0.0
        }
    }
}

/// Terminal loss F(x).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TerminalLoss {
    /// F(x) = scale·exp(exponent·x).
    Exponential { scale: f64, exponent: f64 },
    /// F(x) = scale·max(x, 0)².
    Quadratic { scale: f64 },
    /// F(x) = scale·ln(1 + exp(exponent·x)) / exponent; slope bounded by `scale`.
    Softplus { scale: f64, exponent: f64 },
}

impl TerminalLoss {
    pub fn value(&self, x: f64) -> f64 {
        match *self {
            TerminalLoss::Exponential { scale, exponent } => scale * (exponent * x).exp(),
            TerminalLoss::Quadratic { scale } => scale * x.max(0.0).powi(2),
            TerminalLoss::Softplus { scale, exponent } => {
                let z = exponent * x;
                // ln(1 + e^z) without overflow
                let sp = if z > 0.0 { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
                scale * sp / exponent
            }
        }
    }

    pub fn dx(&self, x: f64) -> f64 {
        match *self {
            TerminalLoss::Exponential { scale, exponent } => scale * exponent * (exponent * x).exp(),
            TerminalLoss::Quadratic { scale } => 2.0 * scale * x.max(0.0),
            TerminalLoss::Softplus { scale, exponent } => scale * logistic(exponent * x),
        }
    }

    pub fn dxx(&self, x: f64) -> f64 {
        match *self {
            TerminalLoss::Exponential { scale, exponent } => {
                scale * exponent * exponent * (exponent * x).exp()
            }
            TerminalLoss::Quadratic { scale } => {
                if x > 0.0 {
                    2.0 * scale
                } else {
                    0.0
                }
            }
            TerminalLoss::Softplus { scale, exponent } => {
                let p = logistic(exponent * x);
                scale * exponent * p * (1.0 - p)
            }
        }
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Proportional purchasing cost c(t).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Cost {
    Constant { c: f64 },
}

impl Cost {
    pub fn value(&self, _t: f64) -> f64 {
        match *self {
            Cost::Constant { c } => c,
        }
    }

    pub fn dt(&self, _t: f64) -> f64 {
        0.0
    }
}

/// Discount function β(t), β(0) = 1, non-increasing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Discount {
    /// exp(−γ t); γ = 0 gives β ≡ 1.
    Exponential { gamma: f64 },
    /// 1 / (1 + k t).
    Hyperbolic { k: f64 },
    /// λ·exp(−γ₁ t) + (1 − λ)·exp(−γ₂ t).
    Mixture { lambda: f64, gamma1: f64, gamma2: f64 },
}

impl Discount {
    /// β(t) and β′(t).
    pub fn eval(&self, t: f64) -> (f64, f64) {
        match *self {
            Discount::Exponential { gamma } => {
                let e = (-gamma * t).exp();
                (e, -gamma * e)
            }
            Discount::Hyperbolic { k } => {
                let d = 1.0 / (1.0 + k * t);
                (d, -k * d * d)
            }
            Discount::Mixture { lambda, gamma1, gamma2 } => {
                let e1 = (-gamma1 * t).exp();
                let e2 = (-gamma2 * t).exp();
                (
                    lambda * e1 + (1.0 - lambda) * e2,
                    -lambda * gamma1 * e1 - (1.0 - lambda) * gamma2 * e2,
                )
            }
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        self.eval(t).0
    }

    pub fn derivative(&self, t: f64) -> f64 {
        self.eval(t).1
    }

    /// True when β′ ≡ 0 (the time-consistent, undiscounted case).
    pub fn is_flat(&self) -> bool {
        match *self {
            Discount::Exponential { gamma } => gamma == 0.0,
            Discount::Hyperbolic { k } => k == 0.0,
            Discount::Mixture { lambda, gamma1, gamma2 } => {
                (lambda == 0.0 || gamma1 == 0.0) && (lambda == 1.0 || gamma2 == 0.0)
            }
        }
    }

    /// Rate γ when the discount is exactly exponential.
    pub fn exponential_rate(&self) -> Option<f64> {
        match *self {
            Discount::Exponential { gamma } => Some(gamma),
            Discount::Hyperbolic { k } if k == 0.0 => Some(0.0),
            Discount::Mixture { lambda, gamma1, gamma2 } => {
                if lambda == 1.0 || gamma1 == gamma2 {
                    Some(gamma1)
                } else if lambda == 0.0 {
                    Some(gamma2)
                } else {
                    None
                }
            }
            _ => None,
        }
    }

    pub(crate) fn validate(&self) -> Result<(), String> {
        let ok = match *self {
            Discount::Exponential { gamma } => gamma.is_finite() && gamma >= 0.0,
            Discount::Hyperbolic { k } => k.is_finite() && k >= 0.0,
            Discount::Mixture { lambda, gamma1, gamma2 } => {
                (0.0..=1.0).contains(&lambda)
                    && gamma1.is_finite()
                    && gamma2.is_finite()
                    && gamma1 >= 0.0
                    && gamma2 >= 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(format!("discount parameters {self:?} do not give a non-increasing β"))
        }
    }

    /// Parses `exponential:gamma=0.3`, `hyperbolic:k=1`,
    /// `mixture:lambda=0.5,gamma1=0.1,gamma2=1`.
    pub fn parse(spec: &str) -> Result<Self, String> {
        let (family, args) = spec.split_once(':').unwrap_or((spec, ""));
        let mut kv = std::collections::BTreeMap::new();
        for part in args.split(',').filter(|p| !p.trim().is_empty()) {
            let (k, v) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value in discount spec, got `{part}`"))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| format!("non-numeric discount parameter `{part}`"))?;
            kv.insert(k.trim().to_string(), v);
        }
        let get = |k: &str| {
            kv.get(k)
                .copied()
                .ok_or_else(|| format!("discount spec `{spec}` is missing `{k}`"))
        };
        let d = match family.trim() {
            "exponential" => Discount::Exponential { gamma: get("gamma")? },
            "hyperbolic" => Discount::Hyperbolic { k: get("k")? },
            "mixture" => Discount::Mixture {
                lambda: get("lambda")?,
                gamma1: get("gamma1")?,
                gamma2: get("gamma2")?,
            },
            "flat" | "none" => Discount::Exponential { gamma: 0.0 },
            other => return Err(format!("unknown discount family `{other}`")),
        };
        d.validate()?;
        Ok(d)
    }
}

/// Left-tail envelope κ(x, t) = exp(C_κ·x·exp(κ̄·t)) for x ≤ −1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Kappa {
    pub c_kappa: f64,
    pub rate: f64,
}

impl Kappa {
    pub fn value(&self, x: f64, t: f64) -> f64 {
        (self.c_kappa * x * (self.rate * t).exp()).exp()
    }

    /// (κ, κ_x, κ_xx, κ_t)
    pub fn jet(&self, x: f64, t: f64) -> (f64, f64, f64, f64) {
        let g = self.c_kappa * (self.rate * t).exp();
        let k = (g * x).exp();
        (k, g * k, g * g * k, self.rate * g * x * k)
    }
}
