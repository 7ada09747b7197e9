//! Property suites run by the `verify` command and by the test suite:
//! finite-difference gradient checks, Gumbel sampling statistics and the
//! straight-through identities.

use rand::Rng;

use crate::diff::{grad_check, GradCheckReport, Graph, OpKind, Tensor, Var};
use crate::error::Result;
use crate::gumbel::{
    gumbel_max, gumbel_softmax, gumbel_softmax_values, one_hot, sample_gumbel, straight_through, FrozenSample,
    GumbelNoise,
};
use crate::model::{forward_video, Model, ModelConfig, Route};
use crate::objective::{total_loss, CostModel};
use crate::params::BoundParams;
use crate::policy::{ModalitySpec, PolicyConfig, RolloutMode, RolloutOptions};
use crate::rng::rng_from;
use crate::synth::Segment;

/// Outcome of one named property.
#[derive(Clone, Debug, PartialEq)]
pub struct PropertyOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl PropertyOutcome {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        PropertyOutcome { name, passed, detail }
    }
}

fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

/// `Σ w ⊙ y` with fixed weights, so every output coordinate matters.
fn weighted_sum<'g>(y: Var<'g>, w: &Tensor) -> Result<Var<'g>> {
    y.mul(y.graph().constant(w.clone()))?.sum()
}

/// Checks every operation kind on `draws` random inputs; returns the worst report per kind.
pub fn op_gradient_checks(seed: u64, draws: usize, tol: f64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut rng = rng_from(seed, &[30]);
    let step = 1e-6;
    let kinds = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::MatMul,
        OpKind::Concat,
        OpKind::Slice { start: 1, len: 3 },
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Softmax,
        OpKind::LogSoftmax,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Scale(-1.7),
    ];
    let mut out = Vec::new();
    for kind in kinds {
        let mut worst: Option<GradCheckReport> = None;
        for _ in 0..draws {
            let reports: Vec<GradCheckReport> = match &kind {
                OpKind::Add | OpKind::Sub | OpKind::Mul => {
                    let a = uniform_tensor(&mut rng, &[5], -2.0, 2.0);
                    let b = uniform_tensor(&mut rng, &[5], -2.0, 2.0);
                    let w = uniform_tensor(&mut rng, &[5], -1.0, 1.0);
                    let k = kind.clone();
                    let (bc, ac) = (b.clone(), a.clone());
                    vec![
                        grad_check(
                            |g, x| weighted_sum(g.apply(k.clone(), &[x, g.constant(bc.clone())])?, &w),
                            &a,
                            step,
                            tol,
                        )?,
                        grad_check(
                            |g, x| weighted_sum(g.apply(k.clone(), &[g.constant(ac.clone()), x])?, &w),
                            &b,
                            step,
                            tol,
                        )?,
                    ]
                }
                OpKind::MatMul => {
                    let a = uniform_tensor(&mut rng, &[3, 4], -1.0, 1.0);
                    let b = uniform_tensor(&mut rng, &[4, 2], -1.0, 1.0);
                    let v = uniform_tensor(&mut rng, &[4], -1.0, 1.0);
                    let w = uniform_tensor(&mut rng, &[3, 2], -1.0, 1.0);
                    let w3 = uniform_tensor(&mut rng, &[3], -1.0, 1.0);
                    let w2 = uniform_tensor(&mut rng, &[2], -1.0, 1.0);
                    vec![
                        grad_check(|g, x| weighted_sum(x.matmul(g.constant(b.clone()))?, &w), &a, step, tol)?,
                        grad_check(|g, x| weighted_sum(g.constant(a.clone()).matmul(x)?, &w), &b, step, tol)?,
                        grad_check(
                            |g, x| weighted_sum(g.constant(a.clone()).matmul(x)?, &w3),
                            &v,
                            step,
                            tol,
                        )?,
                        grad_check(
                            |g, x| weighted_sum(x.matmul(g.constant(b.clone()))?, &w2),
                            &v,
                            step,
                            tol,
                        )?,
                    ]
                }
                OpKind::Concat => {
                    let a = uniform_tensor(&mut rng, &[2, 3], -1.0, 1.0);
                    let b = uniform_tensor(&mut rng, &[1, 3], -1.0, 1.0);
                    let w = uniform_tensor(&mut rng, &[3, 3], -1.0, 1.0);
                    vec![
                        grad_check(
                            |g, x| weighted_sum(g.concat(&[x, g.constant(b.clone())])?, &w),
                            &a,
                            step,
                            tol,
                        )?,
                        grad_check(
                            |g, x| weighted_sum(g.concat(&[g.constant(a.clone()), x])?, &w),
                            &b,
                            step,
                            tol,
                        )?,
                    ]
                }
                OpKind::Sum | OpKind::Mean => {
                    let a = uniform_tensor(&mut rng, &[2, 3], -2.0, 2.0);
                    let k = kind.clone();
                    vec![grad_check(|g, x| g.apply(k.clone(), &[x])?.scale(1.3), &a, step, tol)?]
                }
                _ => {
                    let (lo, hi) = if kind == OpKind::Log { (0.2, 3.0) } else { (-2.0, 2.0) };
                    let a = uniform_tensor(&mut rng, &[5], lo, hi);
                    let out_len = if let OpKind::Slice { len, .. } = kind { len } else { 5 };
                    let w = uniform_tensor(&mut rng, &[out_len], -1.0, 1.0);
                    let k = kind.clone();
                    vec![grad_check(
                        |g, x| weighted_sum(g.apply(k.clone(), &[x])?, &w),
                        &a,
                        step,
                        tol,
                    )?]
                }
            };
            for r in reports {
                if worst.as_ref().is_none_or(|w| r.max_rel_error > w.max_rel_error) {
                    worst = Some(r);
                }
            }
        }
        out.push((format!("{kind:?}"), worst.expect("at least one draw")));
    }
    Ok(out)
}

/// Seed of the fixed end-to-end gradient-check fixture.
pub const TOY_SEED: u64 = 0;

/// A small two-modality model with one fixed video, used for end-to-end gradient checks.
pub struct Toy {
    pub model: Model,
    pub segments: Vec<Segment>,
    pub noise: GumbelNoise,
    pub cost: CostModel,
    pub tau: f64,
}

impl Toy {
    /// `T = 5`, `K = 2`, four classes.
    pub fn new(seed: u64) -> Result<Toy> {
        let spec = |name: &str, recog_dim, policy_dim, lambda, recog_cost| ModalitySpec {
            name: name.into(),
            recog_dim,
            policy_dim,
            lambda,
            recog_cost,
            policy_cost: 0.076,
            proxy: false,
        };
        let config = ModelConfig {
            modalities: vec![spec("rgb", 5, 3, 1.0, 1.0), spec("audio", 4, 2, 0.45, 0.45)],
            n_classes: 4,
            policy: PolicyConfig {
                extractor_hidden: 4,
                joint_width: 6,
                lstm_hidden: 4,
                use_lstm: true,
                joint_skip: false,
            },
            recog_hidden: 5,
        };
        let mut model = Model::new(config, seed)?;
        let mut rng = rng_from(seed, &[31]);
        // all parameters, biases included, drawn from U(-1, 1) so no coordinate starts at a flat spot
        for (_, t) in model.params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let segments = (0..5)
            .map(|_| Segment {
                recog: vec![
                    uniform_tensor(&mut rng, &[5], -1.5, 1.5).into_data(),
                    uniform_tensor(&mut rng, &[4], -1.5, 1.5).into_data(),
                ],
                policy: vec![
                    uniform_tensor(&mut rng, &[3], -1.5, 1.5).into_data(),
                    uniform_tensor(&mut rng, &[2], -1.5, 1.5).into_data(),
                ],
            })
            .collect();
        let noise = sample_gumbel(&[5, 2, 2], rng.random());
        Ok(Toy {
            model,
            segments,
            noise,
            cost: CostModel {
                lambda: vec![1.0, 0.45],
                gamma: 10.0,
                segments: 5,
            },
            tau: 1.0,
        })
    }

    /// Full training loss with the discrete branch either sampled or replayed.
    pub fn loss<'g>(
        &self,
        p: &BoundParams<'_, 'g>,
        label: usize,
        replay: Option<(&[Vec<FrozenSample>], bool)>,
    ) -> Result<(Var<'g>, Vec<Vec<FrozenSample>>, bool)> {
        let segs: Vec<&Segment> = self.segments.iter().collect();
        let opts = RolloutOptions {
            mode: RolloutMode::TrainStochastic,
            tau: self.tau,
            noise: Some(&self.noise),
            frozen: replay.map(|r| r.0),
        };
        let out = forward_video(&self.model.config, p, &segs, &Route::Policy(opts))?;
        let g = p.var("recog.fusion")?.graph();
        let terms = total_loss(g, &out.prediction, label, &out.gates, &self.cost, replay.map(|r| r.1))?;
        Ok((terms.loss, out.samples, terms.correct))
    }

    /// Class predicted at the base point; using it as the label exercises the efficiency branch.
    pub fn predicted_label(&self) -> Result<usize> {
        let g = Graph::new();
        let p = self.model.params.bind(&g, |_| false);
        let segs: Vec<&Segment> = self.segments.iter().collect();
        let opts = RolloutOptions {
            mode: RolloutMode::TrainStochastic,
            tau: self.tau,
            noise: Some(&self.noise),
            frozen: None,
        };
        let out = forward_video(&self.model.config, &p, &segs, &Route::Policy(opts))?;
        Ok(out.prediction.predicted_class())
    }

    /// Finite-difference check of the full loss with respect to every parameter,
    /// with the sampled branch frozen at the base point. Reports are merged over tensors.
    pub fn grad_check(&self, label: usize, step: f64, tol: f64) -> Result<GradCheckReport> {
        let (samples, correct) = {
            let g = Graph::new();
            let p = self.model.params.bind(&g, |_| false);
            let (_, samples, correct) = self.loss(&p, label, None)?;
            (samples, correct)
        };
        let mut merged = GradCheckReport {
            analytic: Vec::new(),
            numeric: Vec::new(),
            max_rel_error: 0.0,
            worst_index: 0,
            tol,
            passed: true,
        };
        for (name, value) in self.model.params.iter() {
            let report = grad_check(
                |g, x| {
                    let mut p = self.model.params.bind(g, |_| false);
                    p.replace(name, x)?;
                    Ok(self.loss(&p, label, Some((&samples, correct)))?.0)
                },
                value,
                step,
                tol,
            )?;
            if report.max_rel_error > merged.max_rel_error {
                merged.max_rel_error = report.max_rel_error;
                merged.worst_index = merged.analytic.len() + report.worst_index;
            }
            merged.analytic.extend(report.analytic);
            merged.numeric.extend(report.numeric);
        }
        merged.passed = merged.max_rel_error <= tol;
        Ok(merged)
    }
}

/// Largest total-variation distance between Gumbel-Max frequencies and `softmax(scores)`.
pub fn gumbel_max_tv(scores: [f64; 2], draws: usize, seed: u64) -> f64 {
    let noise = sample_gumbel(&[draws, 2], seed);
    let ones = (0..draws).filter(|&i| gumbel_max(scores, noise.pair(i)) == 1).count();
    let p1 = 1.0 / (1.0 + (scores[0] - scores[1]).exp());
    (ones as f64 / draws as f64 - p1).abs()
}

/// Mean largest component of the relaxed sample at each `tau`, on shared noise.
pub fn mean_max_component(scores: [f64; 2], taus: &[f64], draws: usize, seed: u64) -> Result<Vec<f64>> {
    let noise = sample_gumbel(&[draws, 2], seed);
    taus.iter()
        .map(|&tau| {
            let mut sum = 0.0;
            for i in 0..draws {
                let p = gumbel_softmax_values(scores, noise.pair(i), tau)?;
                sum += p[0].max(p[1]);
            }
            Ok(sum / draws as f64)
        })
        .collect()
}

/// Forward equals the hard sample exactly and backward equals the relaxed gradient bitwise.
pub fn straight_through_mismatches(draws: usize, seed: u64) -> Result<(usize, usize)> {
    let mut rng = rng_from(seed, &[32]);
    let (mut forward_bad, mut backward_bad) = (0, 0);
    for _ in 0..draws {
        let z = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
        let noise = sample_gumbel(&[2], rng.random()).pair(0);
        let tau = rng.random_range(0.1..5.0);
        let w = Tensor::vector(vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]);

        let g = Graph::new();
        let x = g.param(Tensor::vector(z.to_vec()));
        let st = straight_through(x, noise, tau)?;
        if st.carrier.value().data() != one_hot(gumbel_max(z, noise)) {
            forward_bad += 1;
        }
        g.backward(weighted_sum(st.carrier, &w)?)?;
        let via_carrier = x.grad().expect("reached");

        let g2 = Graph::new();
        let x2 = g2.param(Tensor::vector(z.to_vec()));
        g2.backward(weighted_sum(gumbel_softmax(x2, noise, tau)?, &w)?)?;
        let via_soft = x2.grad().expect("reached");
        let same = via_carrier
            .data()
            .iter()
            .zip(via_soft.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            backward_bad += 1;
        }
    }
    Ok((forward_bad, backward_bad))
}

/// Every suite, in a fixed order.
pub fn run_all(seed: u64) -> Result<Vec<PropertyOutcome>> {
    let mut out = Vec::new();

    let ops = op_gradient_checks(seed, 10, 1e-5)?;
    let failing: Vec<&str> = ops.iter().filter(|(_, r)| !r.passed).map(|(n, _)| n.as_str()).collect();
    let worst = ops.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    out.push(PropertyOutcome::new(
        "grad_check.ops",
        failing.is_empty(),
        format!("worst relative error {worst:.3e}; failing: {failing:?}"),
    ));

    // fixed fixture: a central difference at step 1e-5 carries ~1e-11 absolute error,
    // so a toy whose gradient happens to have a coordinate near 1e-8 cannot be checked at 1e-4
    let toy = Toy::new(TOY_SEED)?;
    let label = toy.predicted_label()?;
    let report = toy.grad_check(label, 1e-5, 1e-4)?;
    out.push(PropertyOutcome::new(
        "grad_check.full_loss",
        report.passed,
        format!(
            "max relative error {:.3e} at coordinate {} of {}",
            report.max_rel_error,
            report.worst_index,
            report.analytic.len()
        ),
    ));

    let tvs = [
        gumbel_max_tv([2f64.ln(), 0.0], 100_000, seed ^ 1),
        gumbel_max_tv([0.0, 1.0], 100_000, seed ^ 2),
    ];
    out.push(PropertyOutcome::new(
        "gumbel.max_law",
        tvs.iter().all(|&d| d <= 0.01),
        format!("total variation {:.4} and {:.4}", tvs[0], tvs[1]),
    ));

    let mut simplex_err: f64 = 0.0;
    let noise = sample_gumbel(&[1000, 2], seed ^ 3);
    for tau in [0.05, 0.5, 5.0, 50.0] {
        for i in 0..1000 {
            let p = gumbel_softmax_values([2.0, -0.5], noise.pair(i), tau)?;
            if p.iter().any(|&v| v < 0.0) {
                simplex_err = f64::INFINITY;
            }
            simplex_err = simplex_err.max((p[0] + p[1] - 1.0).abs());
        }
    }
    out.push(PropertyOutcome::new(
        "gumbel.simplex",
        simplex_err <= 1e-12,
        format!("largest deviation from unit sum {simplex_err:.3e}"),
    ));

    let (fwd, bwd) = straight_through_mismatches(100, seed)?;
    out.push(PropertyOutcome::new(
        "straight_through.identities",
        fwd == 0 && bwd == 0,
        format!("{fwd} forward and {bwd} backward mismatches in 100 draws"),
    ));

    let taus = [0.05, 0.1, 1.0, 5.0, 10.0];
    let means = mean_max_component([2.0, 0.0], &taus, 10_000, seed ^ 4)?;
    let monotone = means.windows(2).all(|w| w[1] <= w[0]);
    out.push(PropertyOutcome::new(
        "gumbel.temperature_limits",
        monotone && means[4] <= 0.6 && means[0] >= 0.99,
        format!("mean max component {means:.4?} at tau {taus:?}"),
    ));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_replay_matches_sampled_forward() {
        let toy = Toy::new(3).unwrap();
        let g = Graph::new();
        let p = toy.model.params.bind(&g, |_| false);
        let (sampled, samples, correct) = toy.loss(&p, 1, None).unwrap();
        let (replayed, _, _) = toy.loss(&p, 1, Some((&samples, correct))).unwrap();
        assert_eq!(sampled.item().to_bits(), replayed.item().to_bits());
    }
}
