//! Layered run configuration: documented defaults, then a `key = value`
//! file, then command-line flags.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use mnat::model::ModelConfig;
use mnat::training::{ConsistencySign, Objective, TrainConfig};

use crate::error::CliError;

/// Every accepted key with its default. An empty default means unset.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "1"),
    ("model.model_dim", "64"),
    ("model.hidden_dim", "256"),
    ("model.layers_enc", "2"),
    ("model.layers_dec", "2"),
    ("model.heads", "4"),
    ("model.max_positions", "64"),
    ("model.max_length_bins", "65"),
    ("model.dropout", "0.1"),
    ("train.beta", "0.3"),
    ("train.gamma", "0.4"),
    ("train.max_refine_iterations", "10"),
    ("train.label_smoothing", "0.1"),
    ("train.base_lr", "0.0005"),
    ("train.warmup", "4000"),
    ("train.token_budget", "4096"),
    ("train.max_updates", "300000"),
    ("train.max_epochs", "0"),
    ("train.checkpoint_every", "1000"),
    ("train.average_last", "10"),
    ("train.cr_sign", "positive"),
    ("train.objective", "eecr"),
    ("train.adam_beta1", "0.9"),
    ("train.adam_beta2", "0.98"),
    ("train.adam_eps", "0.000001"),
    ("train.weight_decay", "0.01"),
    ("data.train", ""),
    ("data.valid", ""),
    ("data.test", ""),
    ("data.vocab", ""),
    ("data.checkpoint_dir", "checkpoints"),
    ("decode.iterations", "10"),
    ("decode.candidates", "5"),
    ("decode.batch_size", "64"),
    ("probe.beta", "0.3"),
    ("probe.max_iterations", "10"),
    ("probe.sample_size", "200"),
];

/// Where a resolved value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Default,
    File,
    Flag,
}

#[derive(Debug, Clone)]
pub struct Settings {
    values: BTreeMap<&'static str, (String, Origin)>,
}

fn known(key: &str) -> Option<&'static str> {
    KEYS.iter().map(|(k, _)| *k).find(|k| *k == key)
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            values: KEYS
                .iter()
                .map(|&(k, v)| (k, (v.to_string(), Origin::Default)))
                .collect(),
        }
    }
}

impl Settings {
    /// Applies a config file's text. Lines are `key = value`; `#` starts a
    /// comment; blank lines are ignored.
    pub fn apply_file(&mut self, text: &str, path: &Path) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let bad = |m: String| CliError::Config(format!("{}:{}: {m}", path.display(), i + 1));
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got {line:?}")))?;
            let key = key.trim();
            let name = known(key).ok_or_else(|| bad(format!("unknown key {key:?}")))?;
            self.values
                .insert(name, (value.trim().to_string(), Origin::File));
        }
        Ok(())
    }

    pub fn load_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_file(&text, path)
    }

    pub fn apply_flag(&mut self, key: &str, value: impl ToString) -> Result<(), CliError> {
        let name = known(key).ok_or_else(|| CliError::Config(format!("unknown key {key:?}")))?;
        self.values.insert(name, (value.to_string(), Origin::Flag));
        Ok(())
    }

    pub fn raw(&self, key: &str) -> &str {
        &self
            .values
            .get(key)
            .unwrap_or_else(|| panic!("undeclared key {key}"))
            .0
    }

    pub fn origin(&self, key: &str) -> Origin {
        self.values.get(key).map_or(Origin::Default, |v| v.1)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::Config(format!("{key} = {raw:?}: {e}")))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| PathBuf::from(raw))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeSettings {
    pub iterations: usize,
    pub candidates: usize,
    /// Sentences per decoding batch.
    pub batch_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSettings {
    pub beta: f64,
    pub max_iterations: usize,
    pub sample_size: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Paths {
    pub train: Option<PathBuf>,
    pub valid: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub checkpoint_dir: PathBuf,
}

impl Paths {
    /// The vocabulary file, defaulting to one inside the checkpoint directory.
    pub fn vocab_file(&self) -> PathBuf {
        self.vocab
            .clone()
            .unwrap_or_else(|| self.checkpoint_dir.join("vocab.txt"))
    }

    pub fn averaged_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir.join("averaged.mnat")
    }
}

/// Typed view of resolved settings. `model.vocab_size` is filled in once the
/// vocabulary is known.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub paths: Paths,
    pub decode: DecodeSettings,
    pub probe: ProbeSettings,
}

impl RunConfig {
    pub fn resolve(s: &Settings) -> Result<Self, CliError> {
        let seed: u64 = s.get("seed")?;
        let model = ModelConfig {
            vocab_size: 0,
            model_dim: s.get("model.model_dim")?,
            hidden_dim: s.get("model.hidden_dim")?,
            layers_enc: s.get("model.layers_enc")?,
            layers_dec: s.get("model.layers_dec")?,
            heads: s.get("model.heads")?,
            max_positions: s.get("model.max_positions")?,
            max_length_bins: s.get("model.max_length_bins")?,
            dropout_rate: s.get("model.dropout")?,
            seed,
        };
        let cr_sign = match s.raw("train.cr_sign") {
            "positive" => ConsistencySign::Positive,
            "negative" => ConsistencySign::Negative,
            other => {
                return Err(CliError::Config(format!(
                    "train.cr_sign must be positive or negative, got {other:?}"
                )))
            }
        };
        let objective = match s.raw("train.objective") {
            "eecr" => Objective::Eecr,
            "cmlm" => Objective::Cmlm,
            other => {
                return Err(CliError::Config(format!(
                    "train.objective must be eecr or cmlm, got {other:?}"
                )))
            }
        };
        let max_epochs: usize = s.get("train.max_epochs")?;
        let train = TrainConfig {
            beta: s.get("train.beta")?,
            gamma: s.get("train.gamma")?,
            max_refine_iterations: s.get("train.max_refine_iterations")?,
            label_smoothing: s.get("train.label_smoothing")?,
            base_lr: s.get("train.base_lr")?,
            warmup: s.get("train.warmup")?,
            token_budget: s.get("train.token_budget")?,
            max_updates: s.get("train.max_updates")?,
            max_epochs: if max_epochs == 0 {
                usize::MAX
            } else {
                max_epochs
            },
            checkpoint_every: s.get("train.checkpoint_every")?,
            average_last: s.get("train.average_last")?,
            seed,
            cr_sign,
            objective,
            adam: mnat::optim::AdamConfig {
                beta1: s.get("train.adam_beta1")?,
                beta2: s.get("train.adam_beta2")?,
                eps: s.get("train.adam_eps")?,
                weight_decay: s.get("train.weight_decay")?,
            },
        };
        train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        let decode = DecodeSettings {
            iterations: s.get("decode.iterations")?,
            candidates: s.get("decode.candidates")?,
            batch_size: s.get("decode.batch_size")?,
        };
        if decode.iterations == 0 || decode.candidates == 0 || decode.batch_size == 0 {
            return Err(CliError::Config(
                "decode.iterations, decode.candidates and decode.batch_size must be positive"
                    .into(),
            ));
        }
        if decode.candidates >= model.max_length_bins {
            return Err(CliError::Config(format!(
                "decode.candidates = {} needs at most {} with {} length bins",
                decode.candidates,
                model.max_length_bins.saturating_sub(1),
                model.max_length_bins
            )));
        }
        let probe = ProbeSettings {
            beta: s.get("probe.beta")?,
            max_iterations: s.get("probe.max_iterations")?,
            sample_size: s.get("probe.sample_size")?,
        };
        if !(0.0..=1.0).contains(&probe.beta) || probe.max_iterations == 0 || probe.sample_size == 0
        {
            return Err(CliError::Config(
                "probe.beta must lie in [0, 1]; probe.max_iterations and probe.sample_size must be positive"
                    .into(),
            ));
        }
        Ok(RunConfig {
            seed,
            model,
            train,
            paths: Paths {
                train: s.path("data.train"),
                valid: s.path("data.valid"),
                test: s.path("data.test"),
                vocab: s.path("data.vocab"),
                checkpoint_dir: s
                    .path("data.checkpoint_dir")
                    .unwrap_or_else(|| "checkpoints".into()),
            },
            decode,
            probe,
        })
    }

    /// The model config for a vocabulary of `vocab_size` ids, validated.
    pub fn model_for_vocab(&self, vocab_size: usize) -> Result<ModelConfig, CliError> {
        let cfg = ModelConfig {
            vocab_size,
            ..self.model
        };
        cfg.validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(cfg)
    }
}
