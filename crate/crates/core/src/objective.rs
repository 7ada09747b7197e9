//! Accuracy-plus-efficiency training loss and simulated compute accounting.
//!
//! Per video the loss is
//!
//! ```text
//! -log P[y] + Σ_k λ_k · C_k,    C_k = (‖U_k‖₀ / C)²  if the prediction is correct
//!                                     γ             otherwise
//! ```
//!
//! Correctness is a discrete switch evaluated on the forward value; no
//! gradient flows through it.

use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::policy::{DecisionMatrix, Gate, ModalitySpec};
use crate::recognition::VideoPrediction;

/// Floor applied to `P[y]` before the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct CostModel {
    /// Per-modality weights λ_k.
    pub lambda: Vec<f64>,
    /// Penalty γ for incorrect predictions.
    pub gamma: f64,
    /// Training segments per video (the C in the selected fraction).
    pub segments: usize,
}

impl CostModel {
    pub fn from_specs(specs: &[ModalitySpec], gamma: f64, segments: usize) -> Self {
        CostModel {
            lambda: specs.iter().map(|s| s.lambda).collect(),
            gamma,
            segments,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments == 0 {
            return Err(Error::Config("cost model needs at least one segment".into()));
        }
        if self.lambda.iter().any(|l| !l.is_finite() || *l < 0.0) || !(self.gamma >= 0.0) {
            return Err(Error::Config("lambda and gamma must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `(‖U_k‖₀ / C)²` when correct, `γ` otherwise.
pub fn efficiency_cost(column: &[u8], correct: bool, cost: &CostModel) -> f64 {
    if correct {
        let frac = column.iter().filter(|&&u| u == 1).count() as f64 / cost.segments as f64;
        frac * frac
    } else {
        cost.gamma
    }
}

/// Loss value with the pieces needed for reporting.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms<'g> {
    pub loss: Var<'g>,
    pub cross_entropy: f64,
    pub correct: bool,
}

/// Cross-entropy against `pred`, floored at [`PROB_FLOOR`].
pub fn cross_entropy<'g>(g: &'g Graph, pred: &VideoPrediction<'g>, label: usize) -> Result<Var<'g>> {
    let n = pred.probs.shape()[0];
    if label >= n {
        return Err(Error::Input(format!("label {label} out of range for {n} classes")));
    }
    let floor = -PROB_FLOOR.ln();
    match pred.logits {
        Some(logits) => {
            let log_p = logits.log_softmax()?.slice(label, 1)?;
            if -log_p.item() > floor {
                Ok(g.scalar(floor))
            } else {
                log_p.scale(-1.0)
            }
        }
        None => {
            let p = pred.probs.with_value(|t| t.data()[label]).max(PROB_FLOOR);
            Ok(g.scalar(-p.ln()))
        }
    }
}

/// Full per-video loss.
///
/// `gates[t][k]` supplies the selected fraction: carriers where present (so
/// the fraction has the hard value forward and the relaxed gradient
/// backward), hard values otherwise. `correct_override` pins the correctness
/// switch, used when replaying a recorded branch.
pub fn total_loss<'g>(
    g: &'g Graph,
    pred: &VideoPrediction<'g>,
    label: usize,
    gates: &[Vec<Gate<'g>>],
    cost: &CostModel,
    correct_override: Option<bool>,
) -> Result<LossTerms<'g>> {
    let ce = cross_entropy(g, pred, label)?;
    let correct = correct_override.unwrap_or_else(|| pred.predicted_class() == label);
    let modalities = gates.first().map_or(0, Vec::len);
    if cost.lambda.len() != modalities {
        return Err(Error::Dimension(format!(
            "{} cost weights for {modalities} modalities",
            cost.lambda.len()
        )));
    }
    let mut loss = ce;
    for k in 0..modalities {
        let term = if correct {
            let mut count: Option<Var<'g>> = None;
            for row in gates {
                let u = match row[k].carrier {
                    Some(c) => c,
                    None => g.scalar(if row[k].hard { 1.0 } else { 0.0 }),
                };
                count = Some(match count {
                    Some(c) => c.add(u)?,
                    None => u,
                });
            }
            let frac = count.expect("at least one segment").scale(1.0 / cost.segments as f64)?;
            frac.mul(frac)?
        } else {
            g.scalar(cost.gamma)
        };
        loss = loss.add(term.scale(cost.lambda[k])?)?;
    }
    Ok(LossTerms {
        loss,
        cross_entropy: ce.item(),
        correct,
    })
}

/// Policy charged on every segment for every modality, recognition only where selected.
pub fn simulated_compute(decisions: &DecisionMatrix, specs: &[ModalitySpec]) -> f64 {
    let t = decisions.segments() as f64;
    specs
        .iter()
        .enumerate()
        .map(|(k, s)| s.policy_cost * t + decisions.selected(k) as f64 * s.recog_cost)
        .sum()
}
