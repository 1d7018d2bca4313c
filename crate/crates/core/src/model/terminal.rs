use super::{ProblemInstance, TerminalLoss};
use crate::error::{Error, Result};

/// F̃(x) = min_{a ≥ 0} F(x − a) + c(T)·a.
///
/// For convex F the minimizer is a = (x − x*)⁺ where F′(x*) = c(T), so F̃
/// follows F up to the threshold and is affine with slope c(T) beyond it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EffectiveTerminal {
    /// Kink location; `+∞` when F′ never reaches c(T).
    pub threshold: f64,
    pub cost: f64,
    pub loss: TerminalLoss,
}

const PROBE_LO: f64 = -1.0e3;
const PROBE_HI: f64 = 1.0e3;

pub fn effective_terminal(instance: &ProblemInstance) -> Result<EffectiveTerminal> {
    let cost = instance.cost.value(instance.horizon);
    let loss = instance.terminal_loss;
    let threshold = match loss {
        TerminalLoss::Exponential { scale, exponent } => {
            if scale <= 0.0 {
                f64::INFINITY
            } else {
                (cost / (scale * exponent)).ln() / exponent
            }
        }
        _ => threshold_by_bisection(&loss, cost)?,
    };
    Ok(EffectiveTerminal { threshold, cost, loss })
}

/// Minimises a ↦ F(x − a) + c·a through its first-order condition
/// F′(x − a) = c, which is monotone in a for convex F.
fn threshold_by_bisection(loss: &TerminalLoss, cost: f64) -> Result<f64> {
    let excess = |y: f64| loss.dx(y) - cost;
    if excess(PROBE_LO) > 0.0 {
        return Err(Error::IllPosedTerminal(format!(
            "F′ exceeds c(T) = {cost} on the whole probe range; the purchase size is unbounded"
        )));
    }
    if excess(PROBE_HI) < 0.0 {
        return Ok(f64::INFINITY);
    }
    let (mut lo, mut hi) = (PROBE_LO, PROBE_HI);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if excess(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-14 * (1.0 + mid.abs()) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

impl EffectiveTerminal {
    pub fn value(&self, x: f64) -> f64 {
        if x <= self.threshold {
            self.loss.value(x)
        } else {
            self.loss.value(self.threshold) + self.cost * (x - self.threshold)
        }
    }

    pub fn slope(&self, x: f64) -> f64 {
        if x <= self.threshold {
            self.loss.dx(x)
        } else {
            self.cost
        }
    }

    pub fn curvature(&self, x: f64) -> f64 {
        if x <= self.threshold {
            self.loss.dxx(x)
        } else {
            0.0
        }
    }

    /// Optimal terminal purchase a*(x) = (x − x*)⁺.
    pub fn purchase(&self, x: f64) -> f64 {
        (x - self.threshold).max(0.0)
    }
}
