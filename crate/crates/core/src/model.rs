//! Policy and recognition networks together: parameter layout, initialization
//! and the per-video forward pass.

use rand::Rng;

use crate::diff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::gumbel::FrozenSample;
use crate::params::{BoundParams, ParamStore};
use crate::policy::{rollout, DecisionMatrix, Gate, ModalitySpec, PolicyConfig, RolloutOptions};
use crate::recognition::{fuse_segment, subnetwork_forward, video_predict, VideoPrediction};
use crate::rng::rng_from;
use crate::synth::{Dataset, Segment};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub modalities: Vec<ModalitySpec>,
    pub n_classes: usize,
    pub policy: PolicyConfig,
    /// Hidden width of every recognition sub-network.
    pub recog_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Config("need at least one modality".into()));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        let p = &self.policy;
        if self.recog_hidden == 0 || p.extractor_hidden == 0 || p.joint_width == 0 || p.lstm_hidden == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        self.modalities.iter().try_for_each(ModalitySpec::validate)
    }

    /// Fails with [`Error::Mismatch`] when `data` was not generated for this architecture.
    pub fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.modalities() != self.modalities.len() {
            return Err(Error::Mismatch(format!(
                "dataset has {} modalities, model has {}",
                data.modalities(),
                self.modalities.len()
            )));
        }
        if data.n_classes != self.n_classes {
            return Err(Error::Mismatch(format!(
                "dataset has {} classes, model has {}",
                data.n_classes, self.n_classes
            )));
        }
        for (k, (d, m)) in data.dims.iter().zip(&self.modalities).enumerate() {
            if d.recog != m.recog_dim || d.policy != m.policy_dim {
                return Err(Error::Mismatch(format!(
                    "modality {k}: dataset widths {}/{}, model widths {}/{}",
                    d.recog, d.policy, m.recog_dim, m.policy_dim
                )));
            }
        }
        Ok(())
    }

    /// Parameter names and shapes, in checkpoint order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let p = &self.policy;
        let k = self.modalities.len();
        let mut out = Vec::new();
        for (i, m) in self.modalities.iter().enumerate() {
            out.push((
                format!("policy.extractor.{i}.w"),
                vec![p.extractor_hidden, m.policy_dim],
            ));
            out.push((format!("policy.extractor.{i}.b"), vec![p.extractor_hidden]));
        }
        out.push((
            "policy.extractor.joint1.w".into(),
            vec![p.joint_width, k * p.extractor_hidden],
        ));
        out.push(("policy.extractor.joint1.b".into(), vec![p.joint_width]));
        out.push(("policy.extractor.joint2.w".into(), vec![p.joint_width, p.joint_width]));
        out.push(("policy.extractor.joint2.b".into(), vec![p.joint_width]));
        if p.use_lstm {
            out.push(("policy.lstm.w_ih".into(), vec![4 * p.lstm_hidden, p.joint_width]));
            out.push(("policy.lstm.w_hh".into(), vec![4 * p.lstm_hidden, p.lstm_hidden]));
            out.push(("policy.lstm.b".into(), vec![4 * p.lstm_hidden]));
        }
        for h in 0..p.num_heads(k) {
            out.push((format!("policy.head{h}.w"), vec![2, p.head_input()]));
            out.push((format!("policy.head{h}.b"), vec![2]));
        }
        for (i, m) in self.modalities.iter().enumerate() {
            out.push((format!("recog.sub{i}.w1"), vec![self.recog_hidden, m.recog_dim]));
            out.push((format!("recog.sub{i}.b1"), vec![self.recog_hidden]));
            out.push((format!("recog.sub{i}.w2"), vec![self.n_classes, self.recog_hidden]));
            out.push((format!("recog.sub{i}.b2"), vec![self.n_classes]));
        }
        out.push(("recog.fusion".into(), vec![k]));
        out
    }

    /// Recovers the architecture from a checkpoint. Names and costs come from
    /// `specs`, widths from the checkpoint.
    pub fn infer(params: &ParamStore, specs: &[ModalitySpec]) -> Result<ModelConfig> {
        let shape = |name: &str| -> Result<Vec<usize>> {
            params
                .get(name)
                .map(|t| t.shape().to_vec())
                .ok_or_else(|| Error::Mismatch(format!("checkpoint lacks {name}")))
        };
        let k = shape("recog.fusion")?[0];
        if k != specs.len() {
            return Err(Error::Mismatch(format!(
                "checkpoint has {k} modalities, configuration has {}",
                specs.len()
            )));
        }
        let sub0 = shape("recog.sub0.w1")?;
        let n_classes = shape("recog.sub0.w2")?[0];
        let joint = shape("policy.extractor.joint1.w")?;
        let use_lstm = params.contains("policy.lstm.w_hh");
        let lstm_hidden = if use_lstm {
            shape("policy.lstm.w_hh")?[1]
        } else {
            PolicyConfig::default().lstm_hidden
        };
        let joint_skip = k > 1 && !params.contains("policy.head1.w");
        let mut modalities = specs.to_vec();
        for (i, m) in modalities.iter_mut().enumerate() {
            m.recog_dim = shape(&format!("recog.sub{i}.w1"))?[1];
            m.policy_dim = shape(&format!("policy.extractor.{i}.w"))?[1];
        }
        let config = ModelConfig {
            modalities,
            n_classes,
            policy: PolicyConfig {
                extractor_hidden: joint[1] / k,
                joint_width: joint[0],
                lstm_hidden,
                use_lstm,
                joint_skip,
            },
            recog_hidden: sub0[0],
        };
        let expected = config.layout();
        if expected.len() != params.len() {
            return Err(Error::Mismatch(format!(
                "checkpoint has {} parameters, architecture needs {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, dims) in &expected {
            if shape(name)? != *dims {
                return Err(Error::Mismatch(format!("parameter {name} has an unexpected shape")));
            }
        }
        Ok(config)
    }
}

/// How a forward pass decides which cells to process.
#[derive(Clone, Copy, Debug)]
pub enum Route<'a> {
    /// Ask the policy network.
    Policy(RolloutOptions<'a>),
    /// A fixed `u[t][k]` matrix; the policy network is not run.
    Fixed(&'a [Vec<u8>]),
}

/// Everything a forward pass produces for one video.
#[derive(Debug)]
pub struct Forward<'g> {
    pub prediction: VideoPrediction<'g>,
    pub gates: Vec<Vec<Gate<'g>>>,
    pub decisions: DecisionMatrix,
    /// Discrete samples of a policy route, for replay.
    pub samples: Vec<Vec<FrozenSample>>,
    /// Number of recognition sub-network executions per modality.
    pub executions: Vec<usize>,
}

/// Policy network, recognition sub-networks and fusion weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Uniform `±1/√fan_in` weights and zero biases; decision heads start near 50/50.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let mut rng = rng_from(seed, &[2]);
        let mut params = ParamStore::new();
        for (name, shape) in config.layout() {
            let numel: usize = shape.iter().product();
            let values: Vec<f64> = if shape.len() == 1 {
                vec![0.0; numel]
            } else {
                let bound = if name.starts_with("policy.head") {
                    0.01
                } else {
                    1.0 / (shape[1] as f64).sqrt()
                };
                (0..numel).map(|_| rng.random_range(-bound..bound)).collect()
            };
            params.insert(name, Tensor::new(shape, values)?);
        }
        Ok(Model { config, params })
    }

    /// Wraps loaded parameters after checking them against the architecture.
    pub fn from_params(params: ParamStore, specs: &[ModalitySpec]) -> Result<Model> {
        let config = ModelConfig::infer(&params, specs)?;
        Ok(Model { config, params })
    }
}

/// Runs routing and recognition over `segments`.
///
/// Sub-networks are executed only for selected cells; in training their
/// output is multiplied by the straight-through carrier.
pub fn forward_video<'g>(
    config: &ModelConfig,
    p: &BoundParams<'_, 'g>,
    segments: &[&Segment],
    route: &Route<'_>,
) -> Result<Forward<'g>> {
    let k_count = config.modalities.len();
    let fusion = p.var("recog.fusion")?;
    let g = fusion.graph();
    let (decisions, gates, samples) = match route {
        Route::Policy(opts) => {
            let r = rollout(p, &config.policy, k_count, segments, opts)?;
            (r.decisions, r.gates, r.samples)
        }
        Route::Fixed(u) => {
            if u.len() != segments.len() || u.iter().any(|row| row.len() != k_count) {
                return Err(Error::Dimension(format!(
                    "fixed route must be {} x {k_count}",
                    segments.len()
                )));
            }
            let gates = u
                .iter()
                .map(|row| row.iter().map(|&x| Gate::fixed(x == 1)).collect())
                .collect();
            (DecisionMatrix::fixed(u.to_vec()), gates, Vec::new())
        }
    };
    let mut executions = vec![0usize; k_count];
    let mut preds = Vec::with_capacity(segments.len());
    for (t, seg) in segments.iter().enumerate() {
        if seg.recog.len() != k_count {
            return Err(Error::Dimension(format!(
                "segment {t} has {} recognition views, expected {k_count}",
                seg.recog.len()
            )));
        }
        let mut logits: Vec<Option<Var<'g>>> = vec![None; k_count];
        for (k, slot) in logits.iter_mut().enumerate() {
            if gates[t][k].hard {
                executions[k] += 1;
                let view = g.constant(Tensor::vector(seg.recog[k].clone()));
                *slot = Some(subnetwork_forward(p, k, view)?);
            }
        }
        preds.push(fuse_segment(&logits, &gates[t], fusion)?);
    }
    let prediction = video_predict(g, &preds, config.n_classes)?;
    Ok(Forward {
        prediction,
        gates,
        decisions,
        samples,
        executions,
    })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::diff::Graph;
    use crate::params::ParamGroup;

    pub(crate) fn tiny_config() -> ModelConfig {
        let spec = |name: &str, recog_dim, policy_dim| ModalitySpec {
            name: name.into(),
            recog_dim,
            policy_dim,
            lambda: 1.0,
            recog_cost: 1.0,
            policy_cost: 0.1,
            proxy: false,
        };
        ModelConfig {
            modalities: vec![spec("a", 4, 2), spec("b", 3, 2)],
            n_classes: 3,
            policy: PolicyConfig {
                extractor_hidden: 3,
                joint_width: 4,
                lstm_hidden: 3,
                use_lstm: true,
                joint_skip: false,
            },
            recog_hidden: 5,
        }
    }

    fn segment(x: f64) -> Segment {
        Segment {
            recog: vec![vec![x; 4], vec![-x; 3]],
            policy: vec![vec![x; 2], vec![x * 0.5; 2]],
        }
    }

    #[test]
    fn every_parameter_has_a_group() {
        let m = Model::new(tiny_config(), 1).unwrap();
        assert!(m.params.iter().all(|(n, _)| ParamGroup::of(n).is_some()));
    }

    #[test]
    fn config_round_trips_through_checkpoint() {
        for (lstm, joint) in [(true, false), (false, true)] {
            let mut c = tiny_config();
            c.policy.use_lstm = lstm;
            c.policy.joint_skip = joint;
            let m = Model::new(c.clone(), 3).unwrap();
            let back = Model::from_params(m.params.clone(), &c.modalities).unwrap();
            assert_eq!(back.config.policy.use_lstm, lstm);
            assert_eq!(back.config.policy.joint_skip, joint);
            assert_eq!(back.params, m.params);
        }
    }

    #[test]
    fn execution_counter_matches_selection() {
        let m = Model::new(tiny_config(), 5).unwrap();
        let segs: Vec<Segment> = (0..4).map(|t| segment(t as f64 * 0.3)).collect();
        let refs: Vec<&Segment> = segs.iter().collect();
        let g = Graph::new();
        let p = m.params.bind(&g, |_| false);
        let u = vec![vec![1, 0], vec![0, 0], vec![1, 1], vec![0, 1]];
        let out = forward_video(&m.config, &p, &refs, &Route::Fixed(&u)).unwrap();
        assert_eq!(out.executions, vec![2, 2]);
        let det = forward_video(&m.config, &p, &refs, &Route::Policy(RolloutOptions::deterministic())).unwrap();
        let total: usize = det.executions.iter().sum();
        assert_eq!(total, det.decisions.total_selected());
    }
}
