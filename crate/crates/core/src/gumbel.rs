//! Gumbel-Max sampling, its Gumbel-Softmax relaxation, and the straight-through
//! combination used for the binary keep/skip decisions.
//!
//! Every decision is a length-2 score vector. Component `1` means "process the
//! modality", component `0` means "skip it". The scores are the raw outputs of a
//! decision head, read directly as log-scores.

use rand::Rng;

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng::rng_from;

/// Uniform draws are clamped to `[UNIFORM_EPS, 1 - UNIFORM_EPS]` before the
/// double log so the noise is always finite.
pub const UNIFORM_EPS: f64 = 1e-12;

pub const SKIP: usize = 0;
pub const SELECT: usize = 1;

/// A block of i.i.d. standard Gumbel noise.
#[derive(Clone, Debug, PartialEq)]
pub struct GumbelNoise {
    shape: Vec<usize>,
    values: Vec<f64>,
    seed: u64,
}

impl GumbelNoise {
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The noise pair at flat pair index `i` (for a `[.., .., 2]` block).
    pub fn pair(&self, i: usize) -> [f64; 2] {
        [self.values[2 * i], self.values[2 * i + 1]]
    }
}

/// `-ln(-ln u)` with `u` clamped away from 0 and 1.
pub fn gumbel_from_uniform(u: f64) -> f64 {
    let u = u.clamp(UNIFORM_EPS, 1.0 - UNIFORM_EPS);
    -(-u.ln()).ln()
}

/// Draws `shape` standard Gumbel samples from a generator seeded with `seed`.
pub fn sample_gumbel(shape: &[usize], seed: u64) -> GumbelNoise {
    let mut rng = rng_from(seed, &[]);
    sample_gumbel_with(shape, &mut rng, seed)
}

/// Draws from a caller-owned generator; `seed` is recorded for provenance only.
pub fn sample_gumbel_with<R: Rng>(shape: &[usize], rng: &mut R, seed: u64) -> GumbelNoise {
    assert!(!shape.is_empty(), "noise shape must be non-empty");
    let n: usize = shape.iter().product();
    let values = (0..n).map(|_| gumbel_from_uniform(rng.random::<f64>())).collect();
    GumbelNoise {
        shape: shape.to_vec(),
        values,
        seed,
    }
}

/// Hard sample: `argmax_i (log_scores_i + noise_i)`, ties going to [`SKIP`].
pub fn gumbel_max(log_scores: [f64; 2], noise: [f64; 2]) -> usize {
    if log_scores[1] + noise[1] > log_scores[0] + noise[0] {
        SELECT
    } else {
        SKIP
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("temperature must be positive, got {tau}")))
    }
}

/// Relaxed sample `softmax((log_scores + noise) / tau)` on plain values.
pub fn gumbel_softmax_values(log_scores: [f64; 2], noise: [f64; 2], tau: f64) -> Result<[f64; 2]> {
    check_tau(tau)?;
    let a = (log_scores[0] + noise[0]) / tau;
    let b = (log_scores[1] + noise[1]) / tau;
    let m = a.max(b);
    let (ea, eb) = ((a - m).exp(), (b - m).exp());
    Ok([ea / (ea + eb), eb / (ea + eb)])
}

/// Relaxed sample on the tape, differentiable with respect to `log_scores`.
pub fn gumbel_softmax<'g>(log_scores: Var<'g>, noise: [f64; 2], tau: f64) -> Result<Var<'g>> {
    check_tau(tau)?;
    let g = log_scores.graph();
    log_scores
        .add(g.constant(Tensor::vector(noise.to_vec())))?
        .scale(1.0 / tau)?
        .softmax()
}

/// Discrete state of one straight-through sample, kept so the same branch can
/// be replayed when parameters are perturbed (finite-difference checks).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrozenSample {
    pub index: usize,
    pub soft: [f64; 2],
}

/// Result of [`straight_through`].
#[derive(Clone, Copy, Debug)]
pub struct StraightThrough<'g> {
    /// Index of the hard sample.
    pub index: usize,
    /// Relaxed sample; only its gradient reaches the carrier.
    pub soft: Var<'g>,
    /// `hard + (soft - detach(soft))`: equal to the one-hot forward, soft backward.
    pub carrier: Var<'g>,
}

impl StraightThrough<'_> {
    pub fn hard(&self) -> [f64; 2] {
        one_hot(self.index)
    }

    pub fn frozen(&self) -> FrozenSample {
        let soft = self.soft.value();
        FrozenSample {
            index: self.index,
            soft: [soft.data()[0], soft.data()[1]],
        }
    }
}

pub fn one_hot(index: usize) -> [f64; 2] {
    let mut v = [0.0; 2];
    v[index] = 1.0;
    v
}

/// Forward uses the Gumbel-Max sample, backward uses the Gumbel-Softmax gradient.
pub fn straight_through<'g>(log_scores: Var<'g>, noise: [f64; 2], tau: f64) -> Result<StraightThrough<'g>> {
    straight_through_inner(log_scores, noise, tau, None)
}

/// Like [`straight_through`] but with the hard index and the detached soft
/// value pinned to `frozen`. At the point where `frozen` was recorded the
/// forward value is identical; elsewhere only the soft path moves.
pub fn straight_through_frozen<'g>(
    log_scores: Var<'g>,
    noise: [f64; 2],
    tau: f64,
    frozen: FrozenSample,
) -> Result<StraightThrough<'g>> {
    straight_through_inner(log_scores, noise, tau, Some(frozen))
}

fn straight_through_inner<'g>(
    log_scores: Var<'g>,
    noise: [f64; 2],
    tau: f64,
    frozen: Option<FrozenSample>,
) -> Result<StraightThrough<'g>> {
    let g: &'g Graph = log_scores.graph();
    let soft = gumbel_softmax(log_scores, noise, tau)?;
    let (index, detached) = match frozen {
        Some(f) => (f.index, g.constant(Tensor::vector(f.soft.to_vec()))),
        None => {
            let s = log_scores.value();
            let index = gumbel_max([s.data()[0], s.data()[1]], noise);
            (index, soft.detach())
        }
    };
    let hard = g.constant(Tensor::vector(one_hot(index).to_vec()));
    let carrier = hard.add(soft.sub(detached)?)?;
    Ok(StraightThrough { index, soft, carrier })
}

/// Exponential temperature decay with a positive floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TemperatureSchedule {
    pub tau0: f64,
    pub anneal_factor: f64,
    pub tau_min: f64,
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule {
            tau0: 5.0,
            anneal_factor: 0.965,
            tau_min: 0.05,
        }
    }
}

impl TemperatureSchedule {
    pub fn new(tau0: f64, anneal_factor: f64, tau_min: f64) -> Result<Self> {
        let s = TemperatureSchedule {
            tau0,
            anneal_factor,
            tau_min,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.anneal_factor > 0.0 && self.anneal_factor <= 1.0) {
            return Err(Error::Config(format!(
                "anneal_factor must lie in (0, 1], got {}",
                self.anneal_factor
            )));
        }
        if !(self.tau_min > 0.0) || !(self.tau0 >= self.tau_min) {
            return Err(Error::Config(format!(
                "need tau0 >= tau_min > 0, got tau0={} tau_min={}",
                self.tau0, self.tau_min
            )));
        }
        Ok(())
    }

    /// `max(tau_min, tau0 * anneal_factor^epoch)`.
    pub fn anneal(&self, epoch: usize) -> f64 {
        (self.tau0 * self.anneal_factor.powi(epoch as i32)).max(self.tau_min)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_one_over_e_maps_to_zero() {
        let u = (-1.0f64).exp();
        assert!(gumbel_from_uniform(u).abs() < 1e-15);
    }

    #[test]
    fn clamped_extremes_are_finite() {
        assert!(gumbel_from_uniform(0.0).is_finite());
        assert!(gumbel_from_uniform(1.0).is_finite());
    }

    #[test]
    fn same_seed_same_noise() {
        assert_eq!(sample_gumbel(&[4, 2, 2], 9), sample_gumbel(&[4, 2, 2], 9));
        assert_ne!(sample_gumbel(&[4, 2, 2], 9), sample_gumbel(&[4, 2, 2], 10));
    }

    #[test]
    fn tie_goes_to_skip() {
        assert_eq!(gumbel_max([0.0, 0.0], [0.0, 0.0]), SKIP);
    }

    #[test]
    fn dominant_select() {
        assert_eq!(gumbel_max([-10.0, 10.0], [4.9, -4.9]), SELECT);
    }

    #[test]
    fn relaxed_symmetric_and_sharp() {
        for tau in [0.1, 1.0, 7.0] {
            assert_eq!(gumbel_softmax_values([0.0, 0.0], [0.0, 0.0], tau).unwrap(), [0.5, 0.5]);
        }
        let p = gumbel_softmax_values([2.0, 0.0], [0.0, 0.0], 1.0).unwrap();
        assert!((p[0] - 0.880797).abs() < 5e-7 && (p[1] - 0.119203).abs() < 5e-7);
        let p = gumbel_softmax_values([2.0, 0.0], [0.0, 0.0], 0.1).unwrap();
        assert!(p[0] >= 1.0 - 1e-8);
    }

    #[test]
    fn non_positive_tau_is_domain_error() {
        assert!(matches!(
            gumbel_softmax_values([0.0, 0.0], [0.0, 0.0], 0.0),
            Err(Error::Domain(_))
        ));
        let g = Graph::new();
        let s = g.param(Tensor::vector(vec![0.0, 0.0]));
        assert!(gumbel_softmax(s, [0.0, 0.0], -1.0).is_err());
    }

    #[test]
    fn straight_through_hard_forward() {
        // tau = 1, scores [0,0], G = [1,0]: hard is [1,0] and the carrier equals it.
        let g = Graph::new();
        let s = g.param(Tensor::vector(vec![0.0, 0.0]));
        let st = straight_through(s, [1.0, 0.0], 1.0).unwrap();
        assert_eq!(st.hard(), [1.0, 0.0]);
        assert_eq!(st.carrier.value().data(), &[1.0, 0.0]);
    }

    #[test]
    fn frozen_replay_matches_at_base_point() {
        let g = Graph::new();
        let s = g.param(Tensor::vector(vec![0.3, -0.2]));
        let st = straight_through(s, [0.1, 0.7], 2.0).unwrap();
        let replay = straight_through_frozen(s, [0.1, 0.7], 2.0, st.frozen()).unwrap();
        assert_eq!(st.carrier.value(), replay.carrier.value());
    }

    #[test]
    fn schedule_values() {
        let s = TemperatureSchedule::default();
        assert_eq!(s.anneal(0), 5.0);
        assert!((s.anneal(20) - 5.0 * 0.965f64.powi(20)).abs() < 1e-12);
        assert!((s.anneal(20) - 2.452).abs() < 1e-3);
        assert_eq!(s.anneal(10_000), 0.05);
        let flat = TemperatureSchedule::new(3.0, 1.0, 0.05).unwrap();
        assert!((0..50).all(|e| flat.anneal(e) == 3.0));
    }

    #[test]
    fn schedule_validation() {
        assert!(TemperatureSchedule::new(5.0, 0.0, 0.05).is_err());
        assert!(TemperatureSchedule::new(5.0, 1.5, 0.05).is_err());
        assert!(TemperatureSchedule::new(5.0, 0.9, 0.0).is_err());
    }
}
