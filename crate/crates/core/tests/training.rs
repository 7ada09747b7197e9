use amml_core::config::RunConfig;
use amml_core::eval::{evaluate, EvalMode, EvalRouting};
use amml_core::model::Model;
use amml_core::params::{ParamGroup, ParamStore};
use amml_core::synth::{generate, modality_geometry, Dataset};
use amml_core::trainer::{
    alternate, checkpoint_path, train, warmup, FixedRouting, Optimizers, Phase, TrainConfig, TrainReport,
};
use amml_core::Error;

/// A scaled-down default task that trains in about a second.
fn small(seed: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.gen.n_videos = 40;
    cfg.train_videos = 30;
    cfg.model.recog_hidden = 16;
    cfg.train.batch_size = 10;
    cfg.set_seed(seed);
    cfg
}

fn data(cfg: &RunConfig) -> (Dataset, Dataset) {
    generate(&cfg.gen).unwrap().split_at(cfg.train_videos)
}

fn deterministic() -> EvalRouting {
    EvalRouting::Policy(EvalMode::Deterministic)
}

#[test]
fn warmup_separates_clean_data() {
    let mut cfg = RunConfig::default();
    cfg.gen.noise_sigma = 0.1;
    cfg.gen.n_videos = 120;
    let (train_set, _) = generate(&cfg.gen).unwrap().split_at(120);
    let mut model = Model::new(cfg.model.clone(), 0).unwrap();
    let policy_before = model.params.fingerprint(ParamGroup::Policy);
    let mut opt = Optimizers::new(&cfg.train);
    let rows = warmup(&mut model, &train_set, &cfg.train, &mut opt, 0).unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows
        .iter()
        .all(|r| r.phase == Phase::Warmup && r.selection_rate == vec![1.0, 1.0]));
    assert_eq!(model.params.fingerprint(ParamGroup::Policy), policy_before);
    let fused = evaluate(&model, &train_set, &EvalRouting::Fixed(FixedRouting::AllSelect, 0), 10).unwrap();
    assert!(fused.accuracy >= 0.9, "train accuracy {}", fused.accuracy);
}

#[test]
fn zero_warmup_leaves_the_model_unchanged() {
    let cfg = small(1);
    let (train_set, _) = data(&cfg);
    let mut model = Model::new(cfg.model.clone(), 1).unwrap();
    let before = model.params.clone();
    let tc = TrainConfig {
        warmup_epochs: 0,
        ..cfg.train.clone()
    };
    let rows = warmup(&mut model, &train_set, &tc, &mut Optimizers::new(&tc), 0).unwrap();
    assert!(rows.is_empty());
    assert_eq!(model.params, before);
}

/// Nearest class mean over the cells the mask marks informative.
fn oracle_label(gen: &amml_core::synth::GenSpec, video: &amml_core::synth::VideoExample) -> usize {
    let means: Vec<_> = (0..gen.modalities.len())
        .map(|k| modality_geometry(gen, k).means)
        .collect();
    let mask = video.mask.as_ref().unwrap();
    let score = |c: usize| -> f64 {
        let mut d = 0.0;
        for (t, seg) in video.segments.iter().enumerate() {
            for (k, view) in seg.recog.iter().enumerate() {
                if mask[t][k] {
                    d += view.iter().zip(&means[k][c]).map(|(x, m)| (x - m).powi(2)).sum::<f64>();
                }
            }
        }
        d
    };
    (0..gen.n_classes)
        .min_by(|&a, &b| score(a).total_cmp(&score(b)))
        .unwrap()
}

#[test]
fn clean_data_is_nearly_bayes_separable() {
    for seed in 0..3 {
        let mut cfg = RunConfig::default();
        cfg.set_seed(seed);
        cfg.gen.noise_sigma = 0.1;
        let data = generate(&cfg.gen).unwrap();
        let hits = data
            .videos
            .iter()
            .filter(|v| oracle_label(&cfg.gen, v) == v.label)
            .count();
        assert!(hits as f64 / data.videos.len() as f64 >= 0.99, "seed {seed}: {hits}");
    }
}

#[test]
fn report_follows_the_phase_schedule() {
    let cfg = small(2);
    let (train_set, _) = data(&cfg);
    let mut model = Model::new(cfg.model.clone(), 2).unwrap();
    let report = train(&mut model, &train_set, &cfg.train, None).unwrap();
    assert_eq!(report.rows.len(), 35);
    for (e, r) in report.rows.iter().enumerate() {
        assert_eq!(r.epoch, e);
        let phase = match e {
            0..5 => Phase::Warmup,
            5..25 if e % 2 == 1 => Phase::Policy,
            5..25 => Phase::Recognition,
            _ => Phase::Finetune,
        };
        assert_eq!(r.phase, phase, "epoch {e}");
    }
    let alt: Vec<f64> = report.rows[5..25].iter().map(|r| r.tau).collect();
    assert_eq!(alt[0], 5.0);
    assert!((alt[19] - 5.0 * 0.965f64.powi(19)).abs() < 1e-12);
    assert!(alt.windows(2).all(|w| w[1] <= w[0]));
    let csv = report.to_csv(2);
    assert_eq!(csv.lines().count(), 36);
    assert_eq!(
        csv.lines().next().unwrap(),
        "epoch,phase,tau,loss,acc,sel_rate_k0,sel_rate_k1,compute_units"
    );
}

#[test]
fn policy_epochs_freeze_recognition() {
    let cfg = small(3);
    let (train_set, _) = data(&cfg);
    let mut model = Model::new(cfg.model.clone(), 3).unwrap();
    let tc = TrainConfig {
        alternate_epochs: 1,
        ..cfg.train.clone()
    };
    let before = model.params.clone();
    let rows = alternate(&mut model, &train_set, &tc, &mut Optimizers::new(&tc), 0).unwrap();
    assert_eq!(rows[0].phase, Phase::Policy);
    assert_eq!(
        model.params.fingerprint(ParamGroup::Recognition),
        before.fingerprint(ParamGroup::Recognition)
    );
    assert_ne!(
        model.params.fingerprint(ParamGroup::Policy),
        before.fingerprint(ParamGroup::Policy)
    );
}

#[test]
fn finetune_keeps_routes_and_policy() {
    let cfg = small(4);
    let (train_set, test_set) = data(&cfg);
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("run");
    let mut model = Model::new(cfg.model.clone(), 4).unwrap();
    train(&mut model, &train_set, &cfg.train, Some(&prefix)).unwrap();
    let load = |suffix| {
        Model::from_params(
            ParamStore::load(&checkpoint_path(&prefix, suffix)).unwrap(),
            &cfg.model.modalities,
        )
        .unwrap()
    };
    let (before, after) = (load("alternate"), load("final"));
    assert_eq!(after.params, model.params);
    assert_eq!(
        before.params.fingerprint(ParamGroup::Policy),
        after.params.fingerprint(ParamGroup::Policy)
    );
    let a = evaluate(&before, &test_set, &deterministic(), 10).unwrap();
    let b = evaluate(&after, &test_set, &deterministic(), 10).unwrap();
    assert_eq!(a.selection_rate, b.selection_rate);
    assert_eq!(a.compute_units, b.compute_units);
}

fn train_with_threads(cfg: &RunConfig, threads: usize) -> (TrainReport, ParamStore) {
    let (train_set, _) = data(cfg);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .unwrap()
        .install(|| {
            let mut model = Model::new(cfg.model.clone(), cfg.seed).unwrap();
            let report = train(&mut model, &train_set, &cfg.train, None).unwrap();
            (report, model.params)
        })
}

#[test]
fn training_ignores_the_thread_count() {
    let cfg = small(5);
    let (r1, p1) = train_with_threads(&cfg, 1);
    let (r3, p3) = train_with_threads(&cfg, 3);
    assert_eq!(r1.to_csv(2), r3.to_csv(2));
    assert_eq!(p1.to_bytes(), p3.to_bytes());
}

#[test]
fn evaluation_accounting() {
    let cfg = small(6);
    let (train_set, test_set) = data(&cfg);
    let mut model = Model::new(cfg.model.clone(), 6).unwrap();
    train(&mut model, &train_set, &cfg.train, None).unwrap();
    let stochastic = EvalRouting::Policy(EvalMode::Stochastic {
        tau: cfg.train.final_tau(),
        seed: 9,
    });
    let full = evaluate(&model, &test_set, &EvalRouting::Fixed(FixedRouting::AllSelect, 0), 10).unwrap();
    for routing in [
        deterministic(),
        stochastic,
        EvalRouting::Fixed(FixedRouting::Random(0.5), 3),
    ] {
        let r = evaluate(&model, &test_set, &routing, 10).unwrap();
        assert_eq!(r, evaluate(&model, &test_set, &routing, 10).unwrap());
        let policy: f64 = cfg.model.modalities.iter().map(|m| m.policy_cost * 10.0).sum();
        let recog: f64 = cfg
            .model
            .modalities
            .iter()
            .zip(&r.executions)
            .map(|(m, &e)| m.recog_cost * e as f64)
            .sum();
        let videos = test_set.videos.len() as f64;
        assert!((r.compute_units - (policy + recog / videos)).abs() < 1e-9);
        assert!(r.compute_units <= full.compute_units + 1e-12);
    }
}

#[test]
fn empty_training_set_is_an_input_error() {
    let cfg = small(7);
    let (_, empty) = data(&cfg).0.split_at(30);
    let mut model = Model::new(cfg.model.clone(), 7).unwrap();
    assert!(matches!(
        train(&mut model, &empty, &cfg.train, None),
        Err(Error::Input(_))
    ));
}
