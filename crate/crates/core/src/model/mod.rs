//! Problem instances, the effective terminal loss and the assumption checkers.

mod checks;
mod coefficients;
mod terminal;

pub use checks::{
    check_assumption_grid, check_remark_example, documented_mutations, AssumptionReport, CheckItem, Mutation,
    ExampleParams,
};
pub use coefficients::{
    Cost, Discount, Drift, ExposureRate, Kappa, RunningLoss, RunningLossJet, TerminalLoss,
    Volatility,
};
pub use terminal::{effective_terminal, EffectiveTerminal};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One control problem: coefficients, discount and auxiliary bound data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemInstance {
    pub drift: Drift,
    pub volatility: Volatility,
    pub running_loss: RunningLoss,
    pub terminal_loss: TerminalLoss,
    pub cost: Cost,
    pub discount: Discount,
    pub horizon: f64,
    pub kappa: Kappa,
    pub bound_m: f64,
}

impl ProblemInstance {
    /// Checks the structural invariants (positivity, monotone discount,
    /// convex terminal problem with a finite minimizer).
    pub fn validate(&self) -> Result<()> {
        let t_end = self.horizon;
        if !(t_end.is_finite() && t_end > 0.0) {
            return Err(Error::Input(format!("horizon must be positive, got {t_end}")));
        }
        if !(self.bound_m.is_finite() && self.bound_m > 0.0) {
            return Err(Error::Input(format!("bound_m must be positive, got {}", self.bound_m)));
        }
        self.discount.validate().map_err(Error::Input)?;
        let Drift::MeanReverting { b, a } = self.drift;
        let Volatility::Constant { sigma } = self.volatility;
        let Cost::Constant { c } = self.cost;
        for (name, v) in [("drift.b", b), ("drift.a", a)] {
            if !v.is_finite() {
                return Err(Error::Input(format!("{name} is not finite")));
            }
        }
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Input(format!("volatility must be positive, got {sigma}")));
        }
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::Input(format!("cost must be positive, got {c}")));
        }
        let h = &self.running_loss;
        if !(h.scale.is_finite() && h.scale >= 0.0) || h.x0.is_nan() {
            return Err(Error::Input("running loss scale must be nonnegative".into()));
        }
        let ok_terminal = match self.terminal_loss {
            TerminalLoss::Exponential { scale, exponent } => {
                scale.is_finite() && scale >= 0.0 && exponent.is_finite() && exponent > 0.0
            }
            TerminalLoss::Quadratic { scale } => scale.is_finite() && scale > 0.0,
            TerminalLoss::Softplus { scale, exponent } => {
                scale.is_finite() && scale > 0.0 && exponent.is_finite() && exponent > 0.0
            }
        };
        if !ok_terminal {
            return Err(Error::Input(format!(
                "terminal loss parameters {:?} are not admissible",
                self.terminal_loss
            )));
        }
        let ok_kappa = self.kappa.c_kappa.is_finite() && self.kappa.rate.is_finite();
        if !ok_kappa {
            return Err(Error::Input("kappa parameters must be finite".into()));
        }
        // Sample-grid convexity of a -> F(x - a) + c(T) a, i.e. F'' >= 0.
        let n = 401;
        for i in 0..n {
            let x = -10.0 + 20.0 * i as f64 / (n - 1) as f64;
            if self.terminal_loss.dxx(x) < 0.0 || self.terminal_loss.value(x) < 0.0 {
                return Err(Error::Input(format!("terminal loss is not convex and nonnegative at x = {x}")));
            }
            let jet = self.running_loss.jet(x, 0.0);
            if jet.value < 0.0 {
                return Err(Error::Input(format!("running loss is negative at x = {x}")));
            }
        }
        effective_terminal(self)?;
        Ok(())
    }

    /// (β(t), β′(t)) with a range check against the horizon.
    pub fn discount_eval(&self, t: f64) -> Result<(f64, f64)> {
        discount_eval(self, t)
    }

    pub fn sigma(&self, x: f64, t: f64) -> f64 {
        self.volatility.value(x, t)
    }

    pub fn cost_at(&self, t: f64) -> f64 {
        self.cost.value(t)
    }

    /// Returns a copy with a different discount.
    pub fn with_discount(&self, discount: Discount) -> Self {
        ProblemInstance { discount, ..self.clone() }
    }
}

/// (β(t), β′(t)) for 0 ≤ t ≤ T.
pub fn discount_eval(instance: &ProblemInstance, t: f64) -> Result<(f64, f64)> {
    let hi = instance.horizon;
    if !(0.0..=hi).contains(&t) {
        return Err(Error::Range { what: "t", value: t, lo: 0.0, hi });
    }
    Ok(instance.discount.eval(t))
}

/// Truncation window and resolution read from an instance file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub nt: usize,
    pub ns: usize,
}

/// Optional solver section of an instance file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub damping: Option<f64>,
    pub tol_fp: Option<f64>,
    pub max_iter: Option<usize>,
    pub eps_final: Option<f64>,
}

/// Contents of an instance file: the problem plus its grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFile {
    #[serde(flatten)]
    pub instance: ProblemInstance,
    pub grid: GridConfig,
    #[serde(default)]
    pub solver: SolverConfig,
}

impl InstanceFile {
    pub fn parse(text: &str) -> Result<Self> {
        let file: InstanceFile = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        file.instance.validate().map_err(|e| match e {
            Error::Input(m) => Error::Config(m),
            other => other,
        })?;
        Ok(file)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("instance serialises")
    }
}
