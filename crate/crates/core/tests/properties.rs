use amml_core::config::default_modalities;
use amml_core::diff::{grad_check, Graph, Tensor, Var};
use amml_core::eval::{audit_decisions, AuditScores};
use amml_core::gumbel::{gumbel_softmax_values, straight_through};
use amml_core::objective::{cross_entropy, efficiency_cost, simulated_compute, total_loss, CostModel};
use amml_core::policy::{DecisionMatrix, Gate, ModalitySpec};
use amml_core::recognition::{fuse_segment, video_predict, SegmentPrediction};
use amml_core::synth::{generate, Dataset, GenSpec};
use proptest::prelude::*;

const STEP: f64 = 1e-6;
const TOL: f64 = 1e-5;

fn values(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..2.0, len)
}

fn check<F>(f: F, x: Vec<f64>)
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> amml_core::Result<Var<'g>>,
{
    let report = grad_check(f, &Tensor::vector(x), STEP, TOL).unwrap();
    assert!(report.passed, "max relative error {}", report.max_rel_error);
}

/// Weighted sum so every output coordinate contributes differently.
fn reduce<'g>(y: Var<'g>) -> amml_core::Result<Var<'g>> {
    let n: usize = y.shape().iter().product();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.17 * i as f64).collect();
    let w = y.graph().constant(Tensor::new(y.shape(), w)?);
    y.mul(w)?.sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn elementwise_ops_match_differences(x in values(5)) {
        check(|_, v| reduce(v.sigmoid()?), x.clone());
        check(|_, v| reduce(v.tanh()?), x.clone());
        check(|_, v| reduce(v.exp()?), x.clone());
        check(|_, v| reduce(v.softmax()?), x.clone());
        check(|_, v| reduce(v.log_softmax()?), x.clone());
        check(|_, v| v.mean(), x.clone());
        check(|_, v| reduce(v.scale(-1.7)?), x.clone());
        check(|_, v| reduce(v.exp()?.log()?), x);
    }

    #[test]
    fn binary_ops_match_differences(x in values(4), other in values(4)) {
        let o = other.clone();
        check(move |g, v| reduce(v.add(g.constant(Tensor::vector(o.clone())))?), x.clone());
        let o = other.clone();
        check(move |g, v| reduce(g.constant(Tensor::vector(o.clone())).sub(v)?), x.clone());
        let o = other.clone();
        check(move |g, v| reduce(v.mul(g.constant(Tensor::vector(o.clone())))?), x.clone());
        check(|g, v| reduce(v.mul(g.scalar(0.6))?), x.clone());
        check(|g, v| reduce(g.concat(&[v, v.tanh()?])?.slice(2, 5)?), x);
    }

    #[test]
    fn matmul_matches_differences(x in values(4), y in values(6), m in values(12)) {
        let a = m.clone();
        check(move |g, v| reduce(g.constant(Tensor::matrix(3, 4, a.clone())?).matmul(v)?), x);
        check(move |g, v| reduce(v.matmul(g.constant(Tensor::matrix(6, 2, m.clone())?))?), y);
    }

    #[test]
    fn fan_out_accumulates(x in values(3)) {
        let g = Graph::new();
        let v = g.param(Tensor::vector(x.clone()));
        let y = v.mul(v).unwrap().add(v).unwrap().sum().unwrap();
        g.backward(y).unwrap();
        let grad = v.grad().unwrap();
        for (gi, xi) in grad.data().iter().zip(&x) {
            prop_assert!((gi - (2.0 * xi + 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn relaxed_samples_lie_on_the_simplex(a in -30.0f64..30.0, b in -30.0f64..30.0,
                                         n0 in -5.0f64..20.0, n1 in -5.0f64..20.0, tau in 0.01f64..50.0) {
        let p = gumbel_softmax_values([a, b], [n0, n1], tau).unwrap();
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!((p[0] + p[1] - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn straight_through_forward_is_exactly_hard(a in -5.0f64..5.0, b in -5.0f64..5.0,
                                               n0 in -2.0f64..6.0, n1 in -2.0f64..6.0, tau in 0.05f64..5.0) {
        let g = Graph::new();
        let z = g.param(Tensor::vector(vec![a, b]));
        let st = straight_through(z, [n0, n1], tau).unwrap();
        let carrier = st.carrier.value();
        prop_assert_eq!(carrier.data(), &st.hard()[..]);
    }

    #[test]
    fn adding_a_selection_never_lowers_the_cost(bits in prop::collection::vec(0u8..2, 5), pick in 0usize..5,
                                               lambda in 0.0f64..3.0) {
        let cost = CostModel { lambda: vec![lambda], gamma: 10.0, segments: 5 };
        let mut more = bits.clone();
        more[pick] = 1;
        prop_assert!(lambda * efficiency_cost(&more, true, &cost) >= lambda * efficiency_cost(&bits, true, &cost));
    }

    #[test]
    fn zero_weights_give_bitwise_cross_entropy(logits in values(4), label in 0usize..4,
                                               bits in prop::collection::vec(0u8..2, 6)) {
        let g = Graph::new();
        let l = g.param(Tensor::vector(logits));
        let seg = SegmentPrediction { logits: Some(l), active: true };
        let pred = video_predict(&g, &[seg], 4).unwrap();
        let gates: Vec<Vec<Gate>> = bits.chunks(2).map(|r| r.iter().map(|&u| Gate::fixed(u == 1)).collect()).collect();
        let cost = CostModel { lambda: vec![0.0, 0.0], gamma: 0.0, segments: 3 };
        let full = total_loss(&g, &pred, label, &gates, &cost, None).unwrap();
        let ce = cross_entropy(&g, &pred, label).unwrap();
        prop_assert_eq!(full.loss.item().to_bits(), ce.item().to_bits());
    }

    #[test]
    fn fusion_weights_sum_to_one(w in values(3), logits in values(4), sel in prop::collection::vec(0u8..2, 3)) {
        prop_assume!(sel.contains(&1));
        let g = Graph::new();
        let fusion = g.param(Tensor::vector(w));
        let l = g.constant(Tensor::vector(logits.clone()));
        let slots: Vec<Option<Var>> = sel.iter().map(|&u| (u == 1).then_some(l)).collect();
        let gates: Vec<Gate> = sel.iter().map(|&u| Gate::fixed(u == 1)).collect();
        let fused = fuse_segment(&slots, &gates, fusion).unwrap().logits.unwrap().value();
        for (f, l) in fused.data().iter().zip(&logits) {
            prop_assert!((f - l).abs() <= 1e-12 * l.abs().max(1.0));
        }
    }

    #[test]
    fn compute_is_policy_plus_executions(u in prop::collection::vec(prop::collection::vec(0u8..2, 2), 1..12)) {
        let specs = default_modalities();
        let d = DecisionMatrix::fixed(u.clone());
        let executions: Vec<f64> = (0..2).map(|k| u.iter().filter(|r| r[k] == 1).count() as f64).collect();
        let expected: f64 = specs.iter().zip(&executions)
            .map(|(s, &e)| s.policy_cost * u.len() as f64 + e * s.recog_cost)
            .sum();
        prop_assert!((simulated_compute(&d, &specs) - expected).abs() < 1e-12);
        let all = DecisionMatrix::fixed(vec![vec![1, 1]; u.len()]);
        prop_assert!(simulated_compute(&d, &specs) <= simulated_compute(&all, &specs));
    }
}

fn small_spec(seed: u64, videos: usize) -> GenSpec {
    let mut modalities = default_modalities();
    modalities[0].recog_dim = 9;
    modalities[1].recog_dim = 8;
    GenSpec {
        n_classes: 4,
        n_videos: videos,
        segments: 6,
        modalities,
        informative_prob: vec![0.4, 0.6],
        signal_margin: 2.0,
        noise_sigma: 0.5,
        proxy_corruption: 0.1,
        presence_offset: 4.0,
        seed,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn datasets_round_trip(seed in any::<u64>(), videos in 1usize..6) {
        let data = generate(&small_spec(seed, videos)).unwrap();
        let bytes = data.to_bytes().unwrap();
        prop_assert_eq!(bytes.len(), data.encoded_len());
        let back = Dataset::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &data);
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn generation_is_deterministic(seed in any::<u64>()) {
        let spec = small_spec(seed, 3);
        prop_assert_eq!(generate(&spec).unwrap(), generate(&spec).unwrap());
    }

    #[test]
    fn audit_reference_points(seed in any::<u64>()) {
        let data = generate(&small_spec(seed, 4)).unwrap();
        let positions: Vec<usize> = (0..data.segments()).collect();
        let as_mask: Vec<DecisionMatrix> = data.videos.iter().map(|v| {
            DecisionMatrix::fixed(v.mask.as_ref().unwrap().iter().map(|r| r.iter().map(|&b| b as u8).collect()).collect())
        }).collect();
        let refs: Vec<&DecisionMatrix> = as_mask.iter().collect();
        let perfect = AuditScores { precision: 1.0, recall: 1.0, f1: 1.0 };
        for s in audit_decisions(&data, &positions, &refs).unwrap() {
            prop_assert!(s == perfect || s == AuditScores::default());
        }
        let all: Vec<DecisionMatrix> = data.videos.iter().map(|_| DecisionMatrix::fixed(vec![vec![1, 1]; 6])).collect();
        let refs: Vec<&DecisionMatrix> = all.iter().collect();
        let scores = audit_decisions(&data, &positions, &refs).unwrap();
        for (k, s) in scores.iter().enumerate() {
            let cells = data.videos.len() * 6;
            let informative: usize = data.videos.iter()
                .map(|v| v.mask.as_ref().unwrap().iter().filter(|r| r[k]).count())
                .sum();
            prop_assert!((s.precision - informative as f64 / cells as f64).abs() < 1e-12);
            prop_assert!(informative == 0 || s.recall == 1.0);
        }
    }
}

#[test]
fn default_modality_specs_are_valid() {
    for s in default_modalities() {
        ModalitySpec::validate(&s).unwrap();
    }
}
