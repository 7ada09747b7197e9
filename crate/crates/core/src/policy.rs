//! The lightweight policy network.
//!
//! Per segment: a one-hidden-layer extractor per modality over its cheap
//! policy view, concatenation, two fully connected layers into the joint
//! feature, one LSTM step, and a 2-way head per modality. The heads' outputs
//! are used directly as Gumbel log-scores.

use crate::diff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::gumbel::{
    gumbel_max, gumbel_softmax_values, straight_through, straight_through_frozen, FrozenSample, GumbelNoise, SELECT,
};
use crate::params::BoundParams;
use crate::synth::Segment;

/// One input stream and what it costs to process.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalitySpec {
    pub name: String,
    /// Width of the recognition view.
    pub recog_dim: usize,
    /// Width of the policy view; never wider than `recog_dim`.
    pub policy_dim: usize,
    /// Weight of this modality's efficiency term in the loss.
    pub lambda: f64,
    /// Simulated compute units for one recognition pass over one segment.
    pub recog_cost: f64,
    /// Simulated compute units for the policy's extractor on one segment.
    pub policy_cost: f64,
    /// The policy view is a cheap correlate rather than a projection of the modality itself.
    pub proxy: bool,
}

impl ModalitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.recog_dim == 0 || self.policy_dim == 0 || self.policy_dim > self.recog_dim {
            return Err(Error::Config(format!(
                "modality {}: need 0 < policy_dim <= recog_dim, got {} and {}",
                self.name, self.policy_dim, self.recog_dim
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "modality {}: lambda must be finite and non-negative",
                self.name
            )));
        }
        if !(self.policy_cost > 0.0 && self.recog_cost > self.policy_cost) {
            return Err(Error::Config(format!(
                "modality {}: need recog_cost > policy_cost > 0",
                self.name
            )));
        }
        Ok(())
    }
}

/// Architecture of the policy network.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyConfig {
    pub extractor_hidden: usize,
    pub joint_width: usize,
    pub lstm_hidden: usize,
    /// When false the heads read the joint feature directly.
    pub use_lstm: bool,
    /// One head gates every modality together.
    pub joint_skip: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            extractor_hidden: 64,
            joint_width: 128,
            lstm_hidden: 64,
            use_lstm: true,
            joint_skip: false,
        }
    }
}

impl PolicyConfig {
    pub fn num_heads(&self, modalities: usize) -> usize {
        if self.joint_skip {
            1
        } else {
            modalities
        }
    }

    pub fn head_input(&self) -> usize {
        if self.use_lstm {
            self.lstm_hidden
        } else {
            self.joint_width
        }
    }
}

/// LSTM hidden and cell state.
#[derive(Clone, Copy, Debug)]
pub struct PolicyState<'g> {
    pub h: Var<'g>,
    pub cell: Var<'g>,
}

impl<'g> PolicyState<'g> {
    pub fn zeros(g: &'g Graph, width: usize) -> Self {
        PolicyState {
            h: g.constant(Tensor::zeros(&[width])),
            cell: g.constant(Tensor::zeros(&[width])),
        }
    }
}

/// Binary decisions for a whole video plus their relaxed companions.
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionMatrix {
    /// `u[t][k]` is 1 when modality `k` is processed at segment `t`.
    pub u: Vec<Vec<u8>>,
    /// Relaxed simplex rows, `[skip, select]`.
    pub p: Vec<Vec<[f64; 2]>>,
    /// Head outputs used as log-scores.
    pub z: Vec<Vec<[f64; 2]>>,
}

impl DecisionMatrix {
    /// A fixed routing with one-hot relaxed rows and zero logits.
    pub fn fixed(u: Vec<Vec<u8>>) -> Self {
        let p = u
            .iter()
            .map(|row| row.iter().map(|&x| crate::gumbel::one_hot(x as usize)).collect())
            .collect();
        let z = u.iter().map(|row| vec![[0.0; 2]; row.len()]).collect();
        DecisionMatrix { u, p, z }
    }

    pub fn segments(&self) -> usize {
        self.u.len()
    }

    pub fn modalities(&self) -> usize {
        self.u.first().map_or(0, Vec::len)
    }

    /// `‖U_k‖₀`.
    pub fn selected(&self, k: usize) -> usize {
        self.u.iter().filter(|row| row[k] == 1).count()
    }

    pub fn column(&self, k: usize) -> Vec<u8> {
        self.u.iter().map(|row| row[k]).collect()
    }

    pub fn total_selected(&self) -> usize {
        self.u.iter().flatten().filter(|&&x| x == 1).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RolloutMode {
    /// Gumbel noise plus straight-through carriers.
    TrainStochastic,
    /// `argmax z`, no noise, ties to skip.
    EvalDeterministic,
    /// Hard Gumbel-Max samples, no carriers.
    EvalStochastic,
}

/// Keep/skip decision for one (segment, modality) cell.
#[derive(Clone, Copy, Debug)]
pub struct Gate<'g> {
    pub hard: bool,
    /// Select component of the straight-through carrier (shape `[1]`), in training.
    pub carrier: Option<Var<'g>>,
}

impl<'g> Gate<'g> {
    pub fn fixed(hard: bool) -> Self {
        Gate { hard, carrier: None }
    }
}

/// Output of [`rollout`].
#[derive(Debug)]
pub struct Rollout<'g> {
    pub decisions: DecisionMatrix,
    /// `gates[t][k]`.
    pub gates: Vec<Vec<Gate<'g>>>,
    /// Discrete state per `[t][head]`, for replay with [`straight_through_frozen`].
    pub samples: Vec<Vec<FrozenSample>>,
}

fn dense<'g>(p: &BoundParams<'_, 'g>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    p.var(&format!("{prefix}.w"))?
        .matmul(x)?
        .add(p.var(&format!("{prefix}.b"))?)
}

/// Joint feature `f_t` from the K policy views of one segment.
pub fn extract_joint_feature<'g>(p: &BoundParams<'_, 'g>, views: &[Var<'g>]) -> Result<Var<'g>> {
    let mut parts = Vec::with_capacity(views.len());
    for (k, &view) in views.iter().enumerate() {
        let prefix = format!("policy.extractor.{k}");
        let w = p.var(&format!("{prefix}.w"))?;
        let (want, got) = (w.shape()[1], view.shape()[0]);
        if want != got {
            return Err(Error::Dimension(format!(
                "policy view {k} has width {got}, extractor expects {want}"
            )));
        }
        parts.push(dense(p, &prefix, view)?.tanh()?);
    }
    let g = views
        .first()
        .ok_or_else(|| Error::Contract("no policy views".into()))?
        .graph();
    let joint = g.concat(&parts)?;
    let hidden = dense(p, "policy.extractor.joint1", joint)?.tanh()?;
    dense(p, "policy.extractor.joint2", hidden)?.tanh()
}

/// One standard LSTM step; gate rows are ordered input, forget, candidate, output.
pub fn lstm_step<'g>(p: &BoundParams<'_, 'g>, f_t: Var<'g>, state: PolicyState<'g>) -> Result<PolicyState<'g>> {
    let width = state.h.shape()[0];
    let pre = p
        .var("policy.lstm.w_ih")?
        .matmul(f_t)?
        .add(p.var("policy.lstm.w_hh")?.matmul(state.h)?)?
        .add(p.var("policy.lstm.b")?)?;
    let input = pre.slice(0, width)?.sigmoid()?;
    let forget = pre.slice(width, width)?.sigmoid()?;
    let candidate = pre.slice(2 * width, width)?.tanh()?;
    let output = pre.slice(3 * width, width)?.sigmoid()?;
    let cell = forget.mul(state.cell)?.add(input.mul(candidate)?)?;
    let h = output.mul(cell.tanh()?)?;
    Ok(PolicyState { h, cell })
}

/// `heads` independent affine maps to 2 logits each.
pub fn decision_heads<'g>(p: &BoundParams<'_, 'g>, input: Var<'g>, heads: usize) -> Result<Vec<Var<'g>>> {
    (0..heads)
        .map(|k| dense(p, &format!("policy.head{k}"), input))
        .collect()
}

/// Repeats a single joint-skip head across every modality.
fn expand<T: Copy>(row: Vec<T>, modalities: usize) -> Vec<T> {
    if row.len() == modalities {
        row
    } else {
        vec![row[0]; modalities]
    }
}

fn pair(v: &Var<'_>) -> [f64; 2] {
    v.with_value(|t| [t.data()[0], t.data()[1]])
}

/// How a rollout samples its decisions.
#[derive(Clone, Copy, Debug)]
pub struct RolloutOptions<'a> {
    pub mode: RolloutMode,
    pub tau: f64,
    /// Shape `[T, heads, 2]`; required by the stochastic modes.
    pub noise: Option<&'a GumbelNoise>,
    /// Replays recorded discrete samples (train-stochastic only).
    pub frozen: Option<&'a [Vec<FrozenSample>]>,
}

impl RolloutOptions<'_> {
    pub fn deterministic() -> Self {
        RolloutOptions {
            mode: RolloutMode::EvalDeterministic,
            tau: 1.0,
            noise: None,
            frozen: None,
        }
    }
}

/// Runs the policy over `segments` in order; decisions at `t` see only segments `..=t`.
pub fn rollout<'g>(
    p: &BoundParams<'_, 'g>,
    config: &PolicyConfig,
    modalities: usize,
    segments: &[&Segment],
    opts: &RolloutOptions<'_>,
) -> Result<Rollout<'g>> {
    let RolloutOptions {
        mode,
        tau,
        noise,
        frozen,
    } = *opts;
    let g = p.var("policy.head0.b")?.graph();
    let heads = config.num_heads(modalities);
    if segments.is_empty() {
        return Err(Error::Input("rollout needs at least one segment".into()));
    }
    if mode != RolloutMode::EvalDeterministic {
        let n = noise.ok_or_else(|| Error::Contract("stochastic rollout without noise".into()))?;
        if n.shape() != [segments.len(), heads, 2] {
            return Err(Error::Dimension(format!(
                "noise shape {:?}, expected [{}, {heads}, 2]",
                n.shape(),
                segments.len()
            )));
        }
    }
    let mut state = PolicyState::zeros(g, config.lstm_hidden);
    let mut out = Rollout {
        decisions: DecisionMatrix {
            u: Vec::new(),
            p: Vec::new(),
            z: Vec::new(),
        },
        gates: Vec::new(),
        samples: Vec::new(),
    };
    for (t, seg) in segments.iter().enumerate() {
        if seg.policy.len() != modalities {
            return Err(Error::Dimension(format!(
                "segment {t} has {} policy views, expected {modalities}",
                seg.policy.len()
            )));
        }
        let views: Vec<Var<'g>> = seg
            .policy
            .iter()
            .map(|v| g.constant(Tensor::vector(v.clone())))
            .collect();
        let f_t = extract_joint_feature(p, &views)?;
        let head_input = if config.use_lstm {
            state = lstm_step(p, f_t, state)?;
            state.h
        } else {
            f_t
        };
        let logits = decision_heads(p, head_input, heads)?;

        let mut head_u = Vec::with_capacity(heads);
        let mut head_p = Vec::with_capacity(heads);
        let mut head_z = Vec::with_capacity(heads);
        let mut head_gate = Vec::with_capacity(heads);
        let mut head_sample = Vec::with_capacity(heads);
        for (h, &z) in logits.iter().enumerate() {
            let zv = pair(&z);
            match mode {
                RolloutMode::TrainStochastic => {
                    let nz = noise.expect("checked").pair(t * heads + h);
                    let st = match frozen {
                        Some(f) => straight_through_frozen(z, nz, tau, f[t][h])?,
                        None => straight_through(z, nz, tau)?,
                    };
                    let sample = st.frozen();
                    head_u.push(st.index as u8);
                    head_p.push(sample.soft);
                    head_sample.push(sample);
                    head_gate.push(Gate {
                        hard: st.index == SELECT,
                        carrier: Some(st.carrier.slice(SELECT, 1)?),
                    });
                }
                RolloutMode::EvalStochastic => {
                    let nz = noise.expect("checked").pair(t * heads + h);
                    let index = gumbel_max(zv, nz);
                    let soft = gumbel_softmax_values(zv, nz, tau)?;
                    head_u.push(index as u8);
                    head_p.push(soft);
                    head_sample.push(FrozenSample { index, soft });
                    head_gate.push(Gate::fixed(index == SELECT));
                }
                RolloutMode::EvalDeterministic => {
                    let index = gumbel_max(zv, [0.0, 0.0]);
                    let soft = gumbel_softmax_values(zv, [0.0, 0.0], tau)?;
                    head_u.push(index as u8);
                    head_p.push(soft);
                    head_sample.push(FrozenSample { index, soft });
                    head_gate.push(Gate::fixed(index == SELECT));
                }
            }
            head_z.push(zv);
        }
        out.decisions.u.push(expand(head_u, modalities));
        out.decisions.p.push(expand(head_p, modalities));
        out.decisions.z.push(expand(head_z, modalities));
        out.gates.push(expand(head_gate, modalities));
        out.samples.push(head_sample);
    }
    Ok(out)
}
