//! Accuracy, selection rates, simulated compute, planted-mask audits and the
//! comparison baselines.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::diff::Graph;
use crate::error::{Error, Result};
use crate::gumbel::sample_gumbel;
use crate::model::{forward_video, Model, ModelConfig, Route};
use crate::objective::simulated_compute;
use crate::policy::{DecisionMatrix, RolloutMode, RolloutOptions};
use crate::rng::derive_seed;
use crate::synth::{Dataset, Segment};
use crate::trainer::{eval_positions, train, train_fixed, FixedRouting, Optimizers, Phase, TrainConfig};

/// How the policy is queried at evaluation time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EvalMode {
    /// `argmax` of the head outputs, no noise.
    Deterministic,
    /// Gumbel-Max samples at temperature `tau`, seeded per video.
    Stochastic { tau: f64, seed: u64 },
}

/// Routing used while evaluating.
#[derive(Clone, Debug, PartialEq)]
pub enum EvalRouting {
    Policy(EvalMode),
    Fixed(FixedRouting, u64),
}

/// Precision, recall and F1 of selections against the planted mask.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AuditScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl AuditScores {
    /// Precision is 0 when nothing is selected, F1 is 0 when precision + recall is 0.
    pub fn from_counts(true_pos: usize, selected: usize, informative: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(true_pos, selected);
        let recall = ratio(true_pos, informative);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        AuditScores { precision, recall, f1 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub videos: usize,
    pub segments: usize,
    pub accuracy: f64,
    /// Fraction of (video, segment) slots where each modality was processed.
    pub selection_rate: Vec<f64>,
    /// Mean simulated compute per video.
    pub compute_units: f64,
    /// Recognition sub-network executions per modality, summed over videos.
    pub executions: Vec<usize>,
    /// Present when the dataset carries masks.
    pub audit: Option<Vec<AuditScores>>,
}

impl EvalReport {
    /// Rows of `metric,modality,value`.
    pub fn rows(&self, names: &[String]) -> Vec<(String, String, f64)> {
        let mut rows = vec![("accuracy".to_string(), "all".to_string(), self.accuracy)];
        for (k, name) in names.iter().enumerate() {
            rows.push(("selection_rate".into(), name.clone(), self.selection_rate[k]));
        }
        rows.push(("compute_units".into(), "all".into(), self.compute_units));
        if let Some(audit) = &self.audit {
            for (k, name) in names.iter().enumerate() {
                rows.push(("precision".into(), name.clone(), audit[k].precision));
                rows.push(("recall".into(), name.clone(), audit[k].recall));
                rows.push(("f1".into(), name.clone(), audit[k].f1));
            }
        }
        rows
    }

    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("metric,modality,value\n");
        for (m, k, v) in self.rows(names) {
            writeln!(out, "{m},{k},{v:.6}").expect("string write");
        }
        out
    }
}

/// Per-video outcome kept until the ordered reduction.
struct VideoOutcome {
    correct: bool,
    decisions: DecisionMatrix,
    executions: Vec<usize>,
    compute: f64,
}

/// Runs every video of `data` through `model` on `segments` evenly spaced segments.
pub fn evaluate(model: &Model, data: &Dataset, routing: &EvalRouting, segments: usize) -> Result<EvalReport> {
    model.config.check_dataset(data)?;
    if data.videos.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let config = &model.config;
    let k_count = config.modalities.len();
    let positions = eval_positions(data.segments(), segments)?;
    let heads = config.policy.num_heads(k_count);
    let outcomes: Vec<VideoOutcome> = data
        .videos
        .par_iter()
        .enumerate()
        .map(|(i, video)| {
            let segs: Vec<&Segment> = positions.iter().map(|&t| &video.segments[t]).collect();
            let g = Graph::new();
            let p = model.params.bind(&g, |_| false);
            let noise;
            let fixed;
            let route = match routing {
                EvalRouting::Policy(EvalMode::Deterministic) => Route::Policy(RolloutOptions::deterministic()),
                EvalRouting::Policy(EvalMode::Stochastic { tau, seed }) => {
                    noise = sample_gumbel(&[segs.len(), heads, 2], derive_seed(*seed, &[20, i as u64]));
                    Route::Policy(RolloutOptions {
                        mode: RolloutMode::EvalStochastic,
                        tau: *tau,
                        noise: Some(&noise),
                        frozen: None,
                    })
                }
                EvalRouting::Fixed(r, seed) => {
                    fixed = r.matrix(segs.len(), k_count, derive_seed(*seed, &[21, i as u64]));
                    Route::Fixed(&fixed)
                }
            };
            let out = forward_video(config, &p, &segs, &route)?;
            Ok(VideoOutcome {
                correct: out.prediction.predicted_class() == video.label,
                compute: simulated_compute(&out.decisions, &config.modalities),
                decisions: out.decisions,
                executions: out.executions,
            })
        })
        .collect::<Result<_>>()?;

    let n = outcomes.len();
    let slots = (n * positions.len()) as f64;
    let mut executions = vec![0usize; k_count];
    let mut selected = vec![0usize; k_count];
    let (mut correct, mut compute) = (0usize, 0.0);
    for o in &outcomes {
        correct += o.correct as usize;
        compute += o.compute;
        for k in 0..k_count {
            executions[k] += o.executions[k];
            selected[k] += o.decisions.selected(k);
        }
    }
    let audit = if data.has_masks() {
        let decisions: Vec<&DecisionMatrix> = outcomes.iter().map(|o| &o.decisions).collect();
        Some(audit_decisions(data, &positions, &decisions)?)
    } else {
        None
    };
    Ok(EvalReport {
        videos: n,
        segments: positions.len(),
        accuracy: correct as f64 / n as f64,
        selection_rate: selected.iter().map(|&s| s as f64 / slots).collect(),
        compute_units: compute / n as f64,
        executions,
        audit,
    })
}

/// Scores `decisions[v]` (taken at `positions`) against the planted masks.
pub fn audit_decisions(data: &Dataset, positions: &[usize], decisions: &[&DecisionMatrix]) -> Result<Vec<AuditScores>> {
    if !data.has_masks() {
        return Err(Error::Input("dataset carries no informativeness masks".into()));
    }
    if decisions.len() != data.videos.len() {
        return Err(Error::Dimension(format!(
            "{} decision matrices for {} videos",
            decisions.len(),
            data.videos.len()
        )));
    }
    let k_count = data.modalities();
    let mut counts = vec![(0usize, 0usize, 0usize); k_count];
    for (video, d) in data.videos.iter().zip(decisions) {
        let mask = video.mask.as_ref().expect("checked");
        for (row, &t) in positions.iter().enumerate() {
            for (k, c) in counts.iter_mut().enumerate() {
                let (sel, inf) = (d.u[row][k] == 1, mask[t][k]);
                c.0 += (sel && inf) as usize;
                c.1 += sel as usize;
                c.2 += inf as usize;
            }
        }
    }
    Ok(counts
        .into_iter()
        .map(|(tp, s, i)| AuditScores::from_counts(tp, s, i))
        .collect())
}

/// Policy-versus-mask scores of a trained model on generated data.
pub fn audit_policy(model: &Model, data: &Dataset, segments: usize) -> Result<Vec<AuditScores>> {
    if !data.has_masks() {
        return Err(Error::Input("dataset carries no informativeness masks".into()));
    }
    let report = evaluate(model, data, &EvalRouting::Policy(EvalMode::Deterministic), segments)?;
    Ok(report.audit.expect("masks checked"))
}

/// Models compared against the learned policy.
#[derive(Clone, Debug, PartialEq)]
pub enum BaselineKind {
    /// The full method.
    Adaptive,
    Unimodal(usize),
    WeightedFusion,
    RandomPolicy,
    JointSkipPolicy,
}

impl BaselineKind {
    pub fn label(&self, names: &[String]) -> String {
        match self {
            BaselineKind::Adaptive => "adamml".into(),
            BaselineKind::Unimodal(k) => format!("unimodal-{}", names.get(*k).map_or("?", String::as_str)),
            BaselineKind::WeightedFusion => "weighted-fusion".into(),
            BaselineKind::RandomPolicy => "random".into(),
            BaselineKind::JointSkipPolicy => "joint-skip".into(),
        }
    }
}

/// Trains `kind` on `train_set` and evaluates it on `test_set`.
///
/// Fixed-routing baselines train recognition for as many epochs as the full
/// schedule has.
pub fn run_baseline(
    kind: &BaselineKind,
    base: &ModelConfig,
    train_set: &Dataset,
    test_set: &Dataset,
    cfg: &TrainConfig,
    mode: EvalMode,
) -> Result<(Model, EvalReport)> {
    cfg.validate()?;
    let mut config = base.clone();
    if *kind == BaselineKind::JointSkipPolicy {
        config.policy.joint_skip = true;
    }
    let mut model = Model::new(config, cfg.seed)?;
    model.config.check_dataset(train_set)?;
    let fixed = match kind {
        BaselineKind::Adaptive | BaselineKind::JointSkipPolicy => None,
        BaselineKind::Unimodal(k) => {
            if *k >= base.modalities.len() {
                return Err(Error::Config(format!("no modality {k} for a unimodal baseline")));
            }
            Some(FixedRouting::Only(*k))
        }
        BaselineKind::WeightedFusion => Some(FixedRouting::AllSelect),
        BaselineKind::RandomPolicy => Some(FixedRouting::Random(0.5)),
    };
    let routing = match fixed {
        None => {
            train(&mut model, train_set, cfg, None)?;
            EvalRouting::Policy(mode)
        }
        Some(r) => {
            let mut opt = Optimizers::new(cfg);
            train_fixed(
                &mut model,
                train_set,
                cfg,
                &mut opt,
                &r,
                Phase::Warmup,
                0,
                cfg.total_epochs(),
            )?;
            EvalRouting::Fixed(r, cfg.seed)
        }
    };
    let report = evaluate(&model, test_set, &routing, cfg.eval_segments)?;
    Ok((model, report))
}

/// One row per model, `metric,modality,value,baseline`.
pub fn comparison_csv(results: &[(String, EvalReport)], names: &[String]) -> String {
    let mut out = String::from("metric,modality,value,baseline\n");
    for (label, report) in results {
        for (m, k, v) in report.rows(names) {
            writeln!(out, "{m},{k},{v:.6},{label}").expect("string write");
        }
    }
    out
}
