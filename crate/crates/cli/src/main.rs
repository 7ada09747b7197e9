use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use amml_core::config::RunConfig;
use amml_core::diff::set_corrupted_softmax_backward;
use amml_core::eval::{comparison_csv, evaluate, run_baseline, BaselineKind, EvalMode, EvalRouting};
use amml_core::model::Model;
use amml_core::params::ParamStore;
use amml_core::synth::{generate, Dataset};
use amml_core::trainer::{checkpoint_path, train};
use amml_core::verify::run_all;
use amml_core::Error;

/// Adaptive multi-modal selection: generate data, train, evaluate, compare and verify.
#[derive(Parser, Debug)]
#[command(name = "amml", version)]
struct Cli {
    /// Run configuration (key = value lines); defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on this.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the leading `train_videos` videos; writes checkpoints and a per-epoch CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Output prefix: `<out>.warmup`, `<out>.alternate`, `<out>.final` and `<out>.csv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the held-out videos (all videos when none are held out).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the adaptive model and the baselines, then evaluate all of them.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the property suites; exits 1 naming any failing property.
    Verify {
        #[arg(long, hide = true)]
        corrupt_softmax_backward: bool,
    },
}

/// Exit codes: 2 configuration or usage, 3 I/O, 4 dataset/model mismatch, 5 malformed file.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Io(_) => 3,
        Error::Mismatch(_) | Error::Input(_) => 4,
        Error::Format { .. } => 5,
        _ => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => match std::fs::read_to_string(path) {
            Ok(text) => RunConfig::parse(&text)?,
            Err(e) => return Err(Error::Config(format!("cannot read {}: {e}", path.display()))),
        },
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    Ok(cfg)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<(), Error> {
    match out {
        Some(path) => std::fs::write(path, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

/// Training and held-out parts of `data`; the held-out part is all of `data` when nothing is left over.
fn split(data: &Dataset, cfg: &RunConfig) -> (Dataset, Dataset) {
    let (train, rest) = data.split_at(cfg.train_videos);
    if rest.videos.is_empty() {
        (train, data.clone())
    } else {
        (train, rest)
    }
}

fn eval_mode(cfg: &RunConfig) -> EvalMode {
    if cfg.eval_stochastic {
        EvalMode::Stochastic {
            tau: cfg.train.final_tau(),
            seed: cfg.seed,
        }
    } else {
        EvalMode::Deterministic
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let names = cfg.modality_names();
    match &cli.command {
        Command::GenData { out } => {
            let data = generate(&cfg.gen)?;
            data.save(out)?;
            let dims: Vec<String> = data.dims.iter().map(|d| format!("{}/{}", d.recog, d.policy)).collect();
            println!(
                "videos={} segments={} modalities={} classes={} dims={} mask_density={:.4}",
                data.videos.len(),
                data.segments(),
                data.modalities(),
                data.n_classes,
                dims.join(","),
                data.mask_density().unwrap_or(0.0)
            );
        }
        Command::Train { data, out } => {
            let data = Dataset::load(data)?;
            cfg.model.check_dataset(&data)?;
            let (train_set, test_set) = split(&data, &cfg);
            let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
            let report = train(&mut model, &train_set, &cfg.train, Some(out))?;
            std::fs::write(checkpoint_path(out, "csv"), report.to_csv(names.len()))?;
            let eval = evaluate(
                &model,
                &test_set,
                &EvalRouting::Policy(eval_mode(&cfg)),
                cfg.train.eval_segments,
            )?;
            let rates: Vec<String> = names
                .iter()
                .zip(&eval.selection_rate)
                .map(|(n, r)| format!("{n}={r:.4}"))
                .collect();
            println!(
                "accuracy={:.4} selection {} compute_units={:.4}",
                eval.accuracy,
                rates.join(" "),
                eval.compute_units
            );
        }
        Command::Eval { checkpoint, data, out } => {
            let params = ParamStore::load(checkpoint)?;
            let model = Model::from_params(params, &cfg.model.modalities)?;
            let data = Dataset::load(data)?;
            let (_, test_set) = split(&data, &cfg);
            let report = evaluate(
                &model,
                &test_set,
                &EvalRouting::Policy(eval_mode(&cfg)),
                cfg.train.eval_segments,
            )?;
            write_or_print(out.as_deref(), &report.to_csv(&names))?;
        }
        Command::Compare { data, out } => {
            let data = Dataset::load(data)?;
            cfg.model.check_dataset(&data)?;
            let (train_set, test_set) = split(&data, &cfg);
            let mut kinds = vec![BaselineKind::Adaptive, BaselineKind::WeightedFusion];
            kinds.extend((0..names.len()).map(BaselineKind::Unimodal));
            kinds.push(BaselineKind::RandomPolicy);
            if cfg.compare_joint_skip {
                kinds.push(BaselineKind::JointSkipPolicy);
            }
            let mut results = Vec::with_capacity(kinds.len());
            for kind in &kinds {
                let (_, report) = run_baseline(kind, &cfg.model, &train_set, &test_set, &cfg.train, eval_mode(&cfg))?;
                results.push((kind.label(&names), report));
            }
            write_or_print(out.as_deref(), &comparison_csv(&results, &names))?;
        }
        Command::Verify {
            corrupt_softmax_backward,
        } => {
            set_corrupted_softmax_backward(*corrupt_softmax_backward);
            let outcomes = run_all(cfg.seed)?;
            let mut failed = Vec::new();
            for o in &outcomes {
                println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.name, o.detail);
                if !o.passed {
                    failed.push(o.name);
                }
            }
            if !failed.is_empty() {
                eprintln!("failing properties: {}", failed.join(", "));
                return Err(Error::Contract("property failure".into()));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot configure {n} threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if !matches!(e, Error::Contract(ref m) if m == "property failure") {
                eprintln!("error: {e}");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
