//! Three-phase training: recognition warm-up under all-select routing,
//! per-epoch alternation between policy and recognition updates with an
//! annealed temperature, then recognition fine-tuning under the frozen
//! deterministic policy.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::diff::Graph;
use crate::error::{Error, Result};
use crate::gumbel::{sample_gumbel, TemperatureSchedule};
use crate::model::{forward_video, Model, Route};
use crate::objective::{cross_entropy, simulated_compute, total_loss, CostModel};
use crate::optim::{Adam, Sgd};
use crate::params::ParamGroup;
use crate::policy::{RolloutMode, RolloutOptions};
use crate::rng::{derive_seed, rng_from};
use crate::synth::{Dataset, Segment, VideoExample};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub warmup_epochs: usize,
    pub alternate_epochs: usize,
    pub finetune_epochs: usize,
    /// Segments drawn from each video per training step (the C of the cost term).
    pub train_segments: usize,
    pub eval_segments: usize,
    pub batch_size: usize,
    pub policy_lr: f64,
    pub policy_betas: (f64, f64),
    pub recog_lr: f64,
    pub recog_momentum: f64,
    pub recog_weight_decay: f64,
    pub schedule: TemperatureSchedule,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_epochs: 5,
            alternate_epochs: 20,
            finetune_epochs: 10,
            train_segments: 5,
            eval_segments: 10,
            batch_size: 8,
            policy_lr: 1e-3,
            policy_betas: (0.9, 0.999),
            recog_lr: 1e-2,
            recog_momentum: 0.9,
            recog_weight_decay: 1e-4,
            schedule: TemperatureSchedule::default(),
            gamma: 10.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train_segments == 0 || self.eval_segments == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "train_segments, eval_segments and batch_size must be positive".into(),
            ));
        }
        let rates = [self.policy_lr, self.recog_lr];
        if rates.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        let (b1, b2) = self.policy_betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.recog_momentum) || !(self.recog_weight_decay >= 0.0) {
            return Err(Error::Config(
                "need momentum in [0, 1) and non-negative weight decay".into(),
            ));
        }
        if !(self.gamma >= 0.0) {
            return Err(Error::Config("gamma must be non-negative".into()));
        }
        self.schedule.validate()
    }

    pub fn total_epochs(&self) -> usize {
        self.warmup_epochs + self.alternate_epochs + self.finetune_epochs
    }

    /// Temperature of alternate-phase epoch `e`; the last one also serves fine-tuning and evaluation.
    pub fn tau(&self, e: usize) -> f64 {
        self.schedule.anneal(e)
    }

    pub fn final_tau(&self) -> f64 {
        self.tau(self.alternate_epochs.saturating_sub(1))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Warmup,
    /// Alternate-phase epoch updating the policy.
    Policy,
    /// Alternate-phase epoch updating recognition.
    Recognition,
    Finetune,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Warmup => "warmup",
            Phase::Policy => "policy",
            Phase::Recognition => "recognition",
            Phase::Finetune => "finetune",
        }
    }

    fn trains(self) -> ParamGroup {
        match self {
            Phase::Policy => ParamGroup::Policy,
            _ => ParamGroup::Recognition,
        }
    }
}

/// Statistics of one epoch, computed over the training passes themselves.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub phase: Phase,
    pub tau: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub selection_rate: Vec<f64>,
    /// Mean simulated compute per training video.
    pub compute_units: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    pub rows: Vec<EpochStats>,
}

impl TrainReport {
    pub fn to_csv(&self, modalities: usize) -> String {
        let mut out = String::from("epoch,phase,tau,loss,acc");
        for k in 0..modalities {
            write!(out, ",sel_rate_k{k}").expect("string write");
        }
        out.push_str(",compute_units\n");
        for r in &self.rows {
            write!(
                out,
                "{},{},{:.6},{:.6},{:.6}",
                r.epoch,
                r.phase.name(),
                r.tau,
                r.loss,
                r.accuracy
            )
            .expect("string write");
            for s in &r.selection_rate {
                write!(out, ",{s:.6}").expect("string write");
            }
            writeln!(out, ",{:.6}", r.compute_units).expect("string write");
        }
        out
    }
}

/// Fixed routings used by warm-up and by the baselines.
#[derive(Clone, Debug, PartialEq)]
pub enum FixedRouting {
    AllSelect,
    /// Only the listed modality is processed.
    Only(usize),
    /// Each cell independently selected with this probability, redrawn per step.
    Random(f64),
}

impl FixedRouting {
    /// `u[t][k]` for `segments` segments; `seed` only matters for [`FixedRouting::Random`].
    pub fn matrix(&self, segments: usize, modalities: usize, seed: u64) -> Vec<Vec<u8>> {
        match self {
            FixedRouting::AllSelect => vec![vec![1; modalities]; segments],
            FixedRouting::Only(k) => (0..segments)
                .map(|_| (0..modalities).map(|j| (j == *k) as u8).collect())
                .collect(),
            FixedRouting::Random(p) => {
                let mut rng = rng_from(seed, &[]);
                (0..segments)
                    .map(|_| (0..modalities).map(|_| (rng.random::<f64>() < *p) as u8).collect())
                    .collect()
            }
        }
    }
}

/// What drives the gates during an epoch.
#[derive(Clone, Debug, PartialEq)]
enum StepRoute {
    Fixed(FixedRouting),
    Stochastic(f64),
    Deterministic,
}

/// Training positions: one segment drawn uniformly from each of `c` equal regions.
pub fn train_positions(total: usize, c: usize, seed: u64) -> Result<Vec<usize>> {
    if c > total {
        return Err(Error::Config(format!(
            "cannot draw {c} training segments from videos of {total}"
        )));
    }
    let mut rng = rng_from(seed, &[]);
    Ok((0..c)
        .map(|i| {
            let (lo, hi) = (i * total / c, (i + 1) * total / c);
            rng.random_range(lo..hi)
        })
        .collect())
}

/// Evaluation positions: `c` evenly spaced segments.
pub fn eval_positions(total: usize, c: usize) -> Result<Vec<usize>> {
    if c > total || c == 0 {
        return Err(Error::Config(format!(
            "cannot take {c} evaluation segments from videos of {total}"
        )));
    }
    Ok((0..c).map(|i| i * total / c).collect())
}

struct StepOutput {
    loss: f64,
    grads: Vec<Option<Vec<f64>>>,
    correct: bool,
    selected: Vec<usize>,
    compute: f64,
}

fn example_step(
    model: &Model,
    video: &VideoExample,
    cfg: &TrainConfig,
    route: &StepRoute,
    group: ParamGroup,
    full_loss: bool,
    seed: u64,
) -> Result<StepOutput> {
    let config = &model.config;
    let k_count = config.modalities.len();
    let positions = train_positions(video.segments.len(), cfg.train_segments, derive_seed(seed, &[0]))?;
    let segments: Vec<&Segment> = positions.iter().map(|&i| &video.segments[i]).collect();
    let g = Graph::new();
    let p = model.params.bind(&g, |grp| grp == group);
    let heads = config.policy.num_heads(k_count);
    let noise;
    let fixed;
    let route = match route {
        StepRoute::Fixed(r) => {
            fixed = r.matrix(segments.len(), k_count, derive_seed(seed, &[1]));
            Route::Fixed(&fixed)
        }
        StepRoute::Stochastic(tau) => {
            noise = sample_gumbel(&[segments.len(), heads, 2], derive_seed(seed, &[2]));
            Route::Policy(RolloutOptions {
                mode: RolloutMode::TrainStochastic,
                tau: *tau,
                noise: Some(&noise),
                frozen: None,
            })
        }
        StepRoute::Deterministic => Route::Policy(RolloutOptions::deterministic()),
    };
    let out = forward_video(config, &p, &segments, &route)?;
    let (loss, correct) = if full_loss {
        let cost = CostModel::from_specs(&config.modalities, cfg.gamma, cfg.train_segments);
        let terms = total_loss(&g, &out.prediction, video.label, &out.gates, &cost, None)?;
        (terms.loss, terms.correct)
    } else {
        let ce = cross_entropy(&g, &out.prediction, video.label)?;
        (ce, out.prediction.predicted_class() == video.label)
    };
    let grads = if loss.requires_grad() {
        g.backward(loss)?;
        p.grads()
    } else {
        vec![None; model.params.len()]
    };
    Ok(StepOutput {
        loss: loss.item(),
        grads,
        correct,
        selected: (0..k_count).map(|k| out.decisions.selected(k)).collect(),
        compute: simulated_compute(&out.decisions, &config.modalities),
    })
}

enum Optimizer {
    Adam(Adam),
    Sgd(Sgd),
}

impl Optimizer {
    fn for_group(group: ParamGroup, cfg: &TrainConfig) -> Self {
        match group {
            ParamGroup::Policy => {
                Optimizer::Adam(Adam::new(group, cfg.policy_lr, cfg.policy_betas.0, cfg.policy_betas.1))
            }
            ParamGroup::Recognition => Optimizer::Sgd(Sgd::new(
                group,
                cfg.recog_lr,
                cfg.recog_momentum,
                cfg.recog_weight_decay,
            )),
        }
    }

    fn step(&mut self, model: &mut Model, grads: &[Option<Vec<f64>>]) -> Result<()> {
        match self {
            Optimizer::Adam(o) => o.step(&mut model.params, grads),
            Optimizer::Sgd(o) => o.step(&mut model.params, grads),
        }
    }
}

/// Optimizer state carried across epochs of a run.
pub struct Optimizers {
    policy: Optimizer,
    recognition: Optimizer,
}

impl Optimizers {
    pub fn new(cfg: &TrainConfig) -> Self {
        Optimizers {
            policy: Optimizer::for_group(ParamGroup::Policy, cfg),
            recognition: Optimizer::for_group(ParamGroup::Recognition, cfg),
        }
    }

    fn get(&mut self, group: ParamGroup) -> &mut Optimizer {
        match group {
            ParamGroup::Policy => &mut self.policy,
            ParamGroup::Recognition => &mut self.recognition,
        }
    }
}

struct EpochPlan {
    epoch: usize,
    phase: Phase,
    tau: f64,
    route: StepRoute,
    full_loss: bool,
}

fn run_epoch(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    opt: &mut Optimizers,
    plan: &EpochPlan,
) -> Result<EpochStats> {
    if data.videos.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let group = plan.phase.trains();
    let frozen = match group {
        ParamGroup::Policy => ParamGroup::Recognition,
        ParamGroup::Recognition => ParamGroup::Policy,
    };
    let frozen_before = model.params.fingerprint(frozen);
    let k_count = model.config.modalities.len();
    let mut order: Vec<usize> = (0..data.videos.len()).collect();
    order.shuffle(&mut rng_from(cfg.seed, &[10, plan.epoch as u64]));

    let (mut loss_sum, mut correct, mut compute) = (0.0, 0usize, 0.0);
    let mut selected = vec![0usize; k_count];
    for batch in order.chunks(cfg.batch_size) {
        let outputs: Vec<StepOutput> = batch
            .par_iter()
            .map(|&i| {
                let seed = derive_seed(cfg.seed, &[11, plan.epoch as u64, i as u64]);
                example_step(model, &data.videos[i], cfg, &plan.route, group, plan.full_loss, seed)
            })
            .collect::<Result<_>>()?;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
        let scale = 1.0 / batch.len() as f64;
        for o in &outputs {
            loss_sum += o.loss;
            correct += o.correct as usize;
            compute += o.compute;
            selected.iter_mut().zip(&o.selected).for_each(|(s, x)| *s += x);
            for (acc, g) in grads.iter_mut().zip(&o.grads) {
                if let Some(g) = g {
                    let acc = acc.get_or_insert_with(|| vec![0.0; g.len()]);
                    acc.iter_mut().zip(g).for_each(|(a, x)| *a += scale * x);
                }
            }
        }
        opt.get(group).step(model, &grads)?;
    }
    if model.params.fingerprint(frozen) != frozen_before {
        return Err(Error::Contract(format!(
            "{:?} parameters changed during a {} epoch",
            frozen,
            plan.phase.name()
        )));
    }
    let n = data.videos.len() as f64;
    let slots = n * cfg.train_segments as f64;
    Ok(EpochStats {
        epoch: plan.epoch,
        phase: plan.phase,
        tau: plan.tau,
        loss: loss_sum / n,
        accuracy: correct as f64 / n,
        selection_rate: selected.iter().map(|&s| s as f64 / slots).collect(),
        compute_units: compute / n,
    })
}

/// Recognition trained with cross-entropy while every modality is processed; the policy is untouched.
pub fn warmup(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    opt: &mut Optimizers,
    first_epoch: usize,
) -> Result<Vec<EpochStats>> {
    train_fixed(
        model,
        data,
        cfg,
        opt,
        &FixedRouting::AllSelect,
        Phase::Warmup,
        first_epoch,
        cfg.warmup_epochs,
    )
}

/// Recognition trained with cross-entropy under a fixed routing.
#[allow(clippy::too_many_arguments)]
pub fn train_fixed(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    opt: &mut Optimizers,
    routing: &FixedRouting,
    phase: Phase,
    first_epoch: usize,
    epochs: usize,
) -> Result<Vec<EpochStats>> {
    (0..epochs)
        .map(|e| {
            let plan = EpochPlan {
                epoch: first_epoch + e,
                phase,
                tau: cfg.schedule.tau0,
                route: StepRoute::Fixed(routing.clone()),
                full_loss: false,
            };
            run_epoch(model, data, cfg, opt, &plan)
        })
        .collect()
}

/// Even epochs update the policy, odd epochs recognition; both minimize the full loss.
pub fn alternate(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    opt: &mut Optimizers,
    first_epoch: usize,
) -> Result<Vec<EpochStats>> {
    (0..cfg.alternate_epochs)
        .map(|e| {
            let tau = cfg.tau(e);
            let plan = EpochPlan {
                epoch: first_epoch + e,
                phase: if e % 2 == 0 { Phase::Policy } else { Phase::Recognition },
                tau,
                route: StepRoute::Stochastic(tau),
                full_loss: true,
            };
            run_epoch(model, data, cfg, opt, &plan)
        })
        .collect()
}

/// Recognition trained with cross-entropy on the routes of the frozen deterministic policy.
pub fn finetune(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    opt: &mut Optimizers,
    first_epoch: usize,
) -> Result<Vec<EpochStats>> {
    (0..cfg.finetune_epochs)
        .map(|e| {
            let plan = EpochPlan {
                epoch: first_epoch + e,
                phase: Phase::Finetune,
                tau: cfg.final_tau(),
                route: StepRoute::Deterministic,
                full_loss: false,
            };
            run_epoch(model, data, cfg, opt, &plan)
        })
        .collect()
}

/// Path of the checkpoint written after `phase`.
pub fn checkpoint_path(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Runs warm-up, alternation and fine-tuning; writes `<prefix>.warmup`,
/// `<prefix>.alternate` and `<prefix>.final` when a prefix is given.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, checkpoints: Option<&Path>) -> Result<TrainReport> {
    cfg.validate()?;
    model.config.check_dataset(data)?;
    if data.videos.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut opt = Optimizers::new(cfg);
    let mut rows = Vec::with_capacity(cfg.total_epochs());
    let save = |model: &Model, suffix: &str| -> Result<()> {
        match checkpoints {
            Some(prefix) => model.params.save(&checkpoint_path(prefix, suffix)),
            None => Ok(()),
        }
    };
    rows.extend(warmup(model, data, cfg, &mut opt, 0)?);
    save(model, "warmup")?;
    rows.extend(alternate(model, data, cfg, &mut opt, rows.len())?);
    save(model, "alternate")?;
    rows.extend(finetune(model, data, cfg, &mut opt, rows.len())?);
    save(model, "final")?;
    Ok(TrainReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn positions_cover_regions() {
        for seed in 0..20 {
            let pos = train_positions(10, 5, seed).unwrap();
            for (i, p) in pos.iter().enumerate() {
                assert!((2 * i..2 * i + 2).contains(p));
            }
        }
        assert_eq!(train_positions(5, 5, 3).unwrap(), vec![0, 1, 2, 3, 4]);
        assert!(train_positions(4, 5, 0).is_err());
        assert_eq!(eval_positions(10, 5).unwrap(), vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn schedule_for_alternation() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.tau(0), 5.0);
        assert!((cfg.tau(19) - 5.0 * 0.965f64.powi(19)).abs() < 1e-12);
        assert_eq!(cfg.total_epochs(), 35);
    }

    #[test]
    fn random_routing_is_seeded() {
        let r = FixedRouting::Random(0.5);
        assert_eq!(r.matrix(5, 2, 9), r.matrix(5, 2, 9));
        assert_eq!(FixedRouting::Only(1).matrix(2, 3, 0), vec![vec![0, 1, 0]; 2]);
    }
}
