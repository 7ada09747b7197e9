//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment, blank lines are ignored and
//! unknown keys are rejected. Modalities are configured with indexed keys:
//!
//! ```text
//! num_modalities = 2
//! modality0.name = rgb
//! modality0.recog_cost = 1.0
//! modality1.name = audio
//! ```

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::gumbel::TemperatureSchedule;
use crate::model::ModelConfig;
use crate::policy::{ModalitySpec, PolicyConfig};
use crate::synth::GenSpec;
use crate::trainer::TrainConfig;

/// Everything a CLI run needs.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub gen: GenSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Number of leading videos used for training; the rest are held out.
    pub train_videos: usize,
    /// Sample evaluation decisions with Gumbel noise at the final temperature instead of taking the argmax.
    pub eval_stochastic: bool,
    /// Adds the joint-skip policy to comparison runs.
    pub compare_joint_skip: bool,
    pub seed: u64,
}

/// The two-modality default task: an expensive stream and a cheaper one.
pub fn default_modalities() -> Vec<ModalitySpec> {
    vec![
        ModalitySpec {
            name: "rgb".into(),
            recog_dim: 24,
            policy_dim: 8,
            lambda: 1.0,
            recog_cost: 1.0,
            policy_cost: 0.076,
            proxy: false,
        },
        ModalitySpec {
            name: "audio".into(),
            recog_dim: 12,
            policy_dim: 4,
            lambda: 0.05,
            recog_cost: 0.45,
            policy_cost: 0.076,
            proxy: false,
        },
    ]
}

impl Default for RunConfig {
    fn default() -> Self {
        let modalities = default_modalities();
        let seed = 0;
        RunConfig {
            gen: GenSpec {
                n_classes: 6,
                n_videos: 300,
                segments: 10,
                modalities: modalities.clone(),
                informative_prob: vec![0.4, 0.6],
                signal_margin: 2.0,
                noise_sigma: 0.9,
                proxy_corruption: 0.1,
                presence_offset: 4.0,
                seed,
            },
            model: ModelConfig {
                modalities,
                n_classes: 6,
                policy: PolicyConfig::default(),
                recog_hidden: 128,
            },
            train: TrainConfig::default(),
            train_videos: 200,
            eval_stochastic: false,
            compare_joint_skip: false,
            seed,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "line {line}: {key} expects true or false, got {value:?}"
        ))),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut entries: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line}: expected key = value")))?;
            let key = key.trim().to_string();
            if entries.insert(key.clone(), (value.trim().to_string(), line)).is_some() {
                return Err(Error::Config(format!("line {line}: {key} set twice")));
            }
        }

        let mut cfg = RunConfig::default();
        let k_count = match entries.remove("num_modalities") {
            Some((v, line)) => {
                let k: usize = parse("num_modalities", &v, line)?;
                if k == 0 {
                    return Err(Error::Config(format!("line {line}: num_modalities must be positive")));
                }
                k
            }
            None => cfg.gen.modalities.len(),
        };
        let defaults = default_modalities();
        let mut modalities: Vec<ModalitySpec> = (0..k_count)
            .map(|k| {
                defaults.get(k).cloned().unwrap_or_else(|| ModalitySpec {
                    name: format!("m{k}"),
                    ..defaults[defaults.len() - 1].clone()
                })
            })
            .collect();
        let mut probs: Vec<f64> = (0..k_count)
            .map(|k| cfg.gen.informative_prob.get(k).copied().unwrap_or(0.5))
            .collect();

        for (key, (value, line)) in &entries {
            let (key, v, line) = (key.as_str(), value.as_str(), *line);
            if let Some(rest) = key.strip_prefix("modality") {
                let (idx, field) = rest
                    .split_once('.')
                    .ok_or_else(|| Error::Config(format!("line {line}: unknown key {key}")))?;
                let k: usize = parse(key, idx, line)?;
                if k >= k_count {
                    return Err(Error::Config(format!(
                        "line {line}: {key} refers to modality {k} but num_modalities is {k_count}"
                    )));
                }
                let m = &mut modalities[k];
                match field {
                    "name" => m.name = v.to_string(),
                    "recog_dim" => m.recog_dim = parse(key, v, line)?,
                    "policy_dim" => m.policy_dim = parse(key, v, line)?,
                    "lambda" => m.lambda = parse(key, v, line)?,
                    "recog_cost" => m.recog_cost = parse(key, v, line)?,
                    "policy_cost" => m.policy_cost = parse(key, v, line)?,
                    "proxy" => m.proxy = parse_bool(key, v, line)?,
                    "informative_prob" => probs[k] = parse(key, v, line)?,
                    _ => return Err(Error::Config(format!("line {line}: unknown key {key}"))),
                }
                continue;
            }
            let (g, t, p) = (&mut cfg.gen, &mut cfg.train, &mut cfg.model.policy);
            match key {
                "seed" => cfg.seed = parse(key, v, line)?,
                "n_classes" => g.n_classes = parse(key, v, line)?,
                "n_videos" => g.n_videos = parse(key, v, line)?,
                "segments" => g.segments = parse(key, v, line)?,
                "signal_margin" => g.signal_margin = parse(key, v, line)?,
                "noise_sigma" => g.noise_sigma = parse(key, v, line)?,
                "proxy_corruption" => g.proxy_corruption = parse(key, v, line)?,
                "presence_offset" => g.presence_offset = parse(key, v, line)?,
                "train_videos" => cfg.train_videos = parse(key, v, line)?,
                "extractor_hidden" => p.extractor_hidden = parse(key, v, line)?,
                "joint_width" => p.joint_width = parse(key, v, line)?,
                "lstm_hidden" => p.lstm_hidden = parse(key, v, line)?,
                "use_lstm" => p.use_lstm = parse_bool(key, v, line)?,
                "joint_skip" => p.joint_skip = parse_bool(key, v, line)?,
                "recog_hidden" => cfg.model.recog_hidden = parse(key, v, line)?,
                "warmup_epochs" => t.warmup_epochs = parse(key, v, line)?,
                "alternate_epochs" => t.alternate_epochs = parse(key, v, line)?,
                "finetune_epochs" => t.finetune_epochs = parse(key, v, line)?,
                "train_segments" => t.train_segments = parse(key, v, line)?,
                "eval_segments" => t.eval_segments = parse(key, v, line)?,
                "batch_size" => t.batch_size = parse(key, v, line)?,
                "policy_lr" => t.policy_lr = parse(key, v, line)?,
                "policy_beta1" => t.policy_betas.0 = parse(key, v, line)?,
                "policy_beta2" => t.policy_betas.1 = parse(key, v, line)?,
                "recog_lr" => t.recog_lr = parse(key, v, line)?,
                "recog_momentum" => t.recog_momentum = parse(key, v, line)?,
                "recog_weight_decay" => t.recog_weight_decay = parse(key, v, line)?,
                "tau0" => t.schedule.tau0 = parse(key, v, line)?,
                "anneal_factor" => t.schedule.anneal_factor = parse(key, v, line)?,
                "tau_min" => t.schedule.tau_min = parse(key, v, line)?,
                "gamma" => t.gamma = parse(key, v, line)?,
                "eval_stochastic" => cfg.eval_stochastic = parse_bool(key, v, line)?,
                "compare_joint_skip" => cfg.compare_joint_skip = parse_bool(key, v, line)?,
                _ => return Err(Error::Config(format!("line {line}: unknown key {key}"))),
            }
        }

        cfg.gen.modalities = modalities.clone();
        cfg.gen.informative_prob = probs;
        cfg.model.modalities = modalities;
        cfg.model.n_classes = cfg.gen.n_classes;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// Propagates `seed` to the generator and the trainer.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.gen.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        TemperatureSchedule::validate(&self.train.schedule)?;
        if self.train.eval_segments > self.gen.segments || self.train.train_segments > self.gen.segments {
            return Err(Error::Config(format!(
                "videos have {} segments; cannot use {} for training or {} for evaluation",
                self.gen.segments, self.train.train_segments, self.train.eval_segments
            )));
        }
        Ok(())
    }

    pub fn modality_names(&self) -> Vec<String> {
        self.model.modalities.iter().map(|m| m.name.clone()).collect()
    }
}
