//! Per-modality recognition sub-networks, late fusion over the selected
//! modalities, and averaging of segment predictions into a video prediction.

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::BoundParams;
use crate::policy::Gate;

/// Two-layer perceptron (tanh hidden) for modality `k`, returning class logits.
pub fn subnetwork_forward<'g>(p: &BoundParams<'_, 'g>, k: usize, view: Var<'g>) -> Result<Var<'g>> {
    let w1 = p.var(&format!("recog.sub{k}.w1"))?;
    let (want, got) = (w1.shape()[1], view.shape()[0]);
    if want != got {
        return Err(Error::Dimension(format!(
            "recognition view {k} has width {got}, sub-network expects {want}"
        )));
    }
    let hidden = w1.matmul(view)?.add(p.var(&format!("recog.sub{k}.b1"))?)?.tanh()?;
    p.var(&format!("recog.sub{k}.w2"))?
        .matmul(hidden)?
        .add(p.var(&format!("recog.sub{k}.b2"))?)
}

/// Fused logits of one segment; `logits` is `None` when every modality was skipped.
#[derive(Clone, Copy, Debug)]
pub struct SegmentPrediction<'g> {
    pub logits: Option<Var<'g>>,
    pub active: bool,
}

/// `Σ_k u_k · α_k · logits_k` with `α = softmax(w)` restricted to the hard-selected set.
///
/// `per_modality_logits[k]` must be present for every selected `k`; skipped
/// modalities are never read.
pub fn fuse_segment<'g>(
    per_modality_logits: &[Option<Var<'g>>],
    gates: &[Gate<'g>],
    fusion: Var<'g>,
) -> Result<SegmentPrediction<'g>> {
    if per_modality_logits.len() != gates.len() {
        return Err(Error::Dimension(format!(
            "{} logit slots for {} gates",
            per_modality_logits.len(),
            gates.len()
        )));
    }
    let selected: Vec<usize> = (0..gates.len()).filter(|&k| gates[k].hard).collect();
    if selected.is_empty() {
        return Ok(SegmentPrediction {
            logits: None,
            active: false,
        });
    }
    let g = fusion.graph();
    let picked: Vec<Var<'g>> = selected.iter().map(|&k| fusion.slice(k, 1)).collect::<Result<_>>()?;
    let alpha = g.concat(&picked)?.softmax()?;
    let mut acc: Option<Var<'g>> = None;
    for (j, &k) in selected.iter().enumerate() {
        let logits = per_modality_logits[k]
            .ok_or_else(|| Error::Contract(format!("modality {k} is selected but was not executed")))?;
        let mut term = logits.mul(alpha.slice(j, 1)?)?;
        if let Some(carrier) = gates[k].carrier {
            term = term.mul(carrier)?;
        }
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    Ok(SegmentPrediction {
        logits: acc,
        active: true,
    })
}

/// Video-level prediction.
#[derive(Clone, Copy, Debug)]
pub struct VideoPrediction<'g> {
    /// Mean of the active segments' logits; `None` when no segment was active.
    pub logits: Option<Var<'g>>,
    /// Softmax of `logits`, or the uniform distribution.
    pub probs: Var<'g>,
}

impl VideoPrediction<'_> {
    /// Arg-max class, lowest index on ties.
    pub fn predicted_class(&self) -> usize {
        self.probs.with_value(|t| argmax(t.data()))
    }
}

pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// Averages the active segments and normalizes; inactive segments abstain.
pub fn video_predict<'g>(
    g: &'g Graph,
    segments: &[SegmentPrediction<'g>],
    n_classes: usize,
) -> Result<VideoPrediction<'g>> {
    let active: Vec<Var<'g>> = segments.iter().filter_map(|s| s.logits).collect();
    if active.is_empty() {
        let uniform = g.constant(Tensor::full(&[n_classes], 1.0 / n_classes as f64));
        return Ok(VideoPrediction {
            logits: None,
            probs: uniform,
        });
    }
    let mut sum = active[0];
    for &v in &active[1..] {
        sum = sum.add(v)?;
    }
    let mean = sum.scale(1.0 / active.len() as f64)?;
    Ok(VideoPrediction {
        logits: Some(mean),
        probs: mean.softmax()?,
    })
}
