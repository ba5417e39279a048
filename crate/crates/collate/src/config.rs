//! Run configuration: a flat key-value text format with section prefixes.
//!
//! Every key has a documented default; unknown keys are rejected so typos
//! fail loudly. The snapshot written to a run directory reproduces an
//! identical run when fed back through `--config`.

use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("bad value {value:?} for {key}: {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("line {line}: expected key=value")]
    BadLine { line: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

/// All pipeline knobs. Defaults target the built-in tiny models; the
/// conventional full-size counterparts are listed in the README.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub templates: String,
    pub providers: usize,
    pub iterations: u32,
    /// Scoring/generation worker threads; 0 means all available cores.
    pub workers: usize,
    pub data_dir: PathBuf,
    /// Optional extra instruction-answer JSONL trained in answer mode only.
    pub plain_data: Option<PathBuf>,
    pub model_kind: String,
    pub model_context: usize,
    pub model_embed: usize,
    pub model_hidden: usize,
    pub decode_max_len: usize,
    pub ift_epochs: usize,
    pub ift_batch: usize,
    pub ift_lr: f64,
    pub dpo_beta: f64,
    pub stage1_epochs: usize,
    pub stage1_lr: f64,
    pub stage1_batch: usize,
    pub task_epochs: usize,
    pub task_lr: f64,
    pub task_batch: usize,
    pub resplit_per_iteration: bool,
    pub diversity: String,
    pub sampling_temperature: f64,
    pub filtration: bool,
    pub sft_epochs: usize,
    pub sft_lr: f64,
    pub sft_batch: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            templates: "compact".to_string(),
            providers: 2,
            iterations: 2,
            workers: 0,
            data_dir: PathBuf::from("data"),
            plain_data: None,
            model_kind: "kgram-mlp".to_string(),
            model_context: 24,
            model_embed: 16,
            model_hidden: 64,
            decode_max_len: 48,
            ift_epochs: 2,
            ift_batch: 8,
            ift_lr: 2e-2,
            dpo_beta: 0.1,
            stage1_epochs: 5,
            stage1_lr: 5e-3,
            stage1_batch: 8,
            task_epochs: 10,
            task_lr: 5e-4,
            task_batch: 8,
            resplit_per_iteration: true,
            diversity: "providers".to_string(),
            sampling_temperature: 1.0,
            filtration: true,
            sft_epochs: 3,
            sft_lr: 2e-2,
            sft_batch: 4,
        }
    }
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: &str| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason: reason.to_string(),
        };
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad("expected integer"))?,
            "templates" => self.templates = value.to_string(),
            "providers" => self.providers = value.parse().map_err(|_| bad("expected integer"))?,
            "iterations" => self.iterations = value.parse().map_err(|_| bad("expected integer"))?,
            "workers" => self.workers = value.parse().map_err(|_| bad("expected integer"))?,
            "data.dir" => self.data_dir = PathBuf::from(value),
            "data.plain" => {
                self.plain_data = (!value.is_empty()).then(|| PathBuf::from(value));
            }
            "model.kind" => match value {
                "bigram" | "kgram-mlp" => self.model_kind = value.to_string(),
                _ => return Err(bad("expected bigram or kgram-mlp")),
            },
            "model.context" => {
                self.model_context = value.parse().map_err(|_| bad("expected integer"))?
            }
            "model.embed" => {
                self.model_embed = value.parse().map_err(|_| bad("expected integer"))?
            }
            "model.hidden" => {
                self.model_hidden = value.parse().map_err(|_| bad("expected integer"))?
            }
            "decode.max-len" => {
                self.decode_max_len = value.parse().map_err(|_| bad("expected integer"))?
            }
            "ift.epochs" => self.ift_epochs = value.parse().map_err(|_| bad("expected integer"))?,
            "ift.batch" => self.ift_batch = value.parse().map_err(|_| bad("expected integer"))?,
            "ift.lr" => self.ift_lr = value.parse().map_err(|_| bad("expected float"))?,
            "dpo.beta" => self.dpo_beta = value.parse().map_err(|_| bad("expected float"))?,
            "dpo.stage1.epochs" => {
                self.stage1_epochs = value.parse().map_err(|_| bad("expected integer"))?
            }
            "dpo.stage1.lr" => self.stage1_lr = value.parse().map_err(|_| bad("expected float"))?,
            "dpo.stage1.batch" => {
                self.stage1_batch = value.parse().map_err(|_| bad("expected integer"))?
            }
            "dpo.task.epochs" => {
                self.task_epochs = value.parse().map_err(|_| bad("expected integer"))?
            }
            "dpo.task.lr" => self.task_lr = value.parse().map_err(|_| bad("expected float"))?,
            "dpo.task.batch" => {
                self.task_batch = value.parse().map_err(|_| bad("expected integer"))?
            }
            "task.resplit-per-iteration" => {
                self.resplit_per_iteration =
                    parse_bool(value).ok_or_else(|| bad("expected true or false"))?
            }
            "ablation.diversity" => match value {
                "providers" | "sampling" => self.diversity = value.to_string(),
                _ => return Err(bad("expected providers or sampling")),
            },
            "ablation.sampling-temperature" => {
                self.sampling_temperature = value.parse().map_err(|_| bad("expected float"))?
            }
            "ablation.filtration" => {
                self.filtration = match value {
                    "on" => true,
                    "off" => false,
                    _ => return Err(bad("expected on or off")),
                }
            }
            "sft.epochs" => self.sft_epochs = value.parse().map_err(|_| bad("expected integer"))?,
            "sft.batch" => self.sft_batch = value.parse().map_err(|_| bad("expected integer"))?,
            "sft.lr" => self.sft_lr = value.parse().map_err(|_| bad("expected float"))?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Apply a `key=value` pair (the `--set` flag form).
    pub fn apply_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (key, value) = pair
            .split_once('=')
            .ok_or(ConfigError::BadLine { line: 0 })?;
        self.apply(key.trim(), value.trim())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let body = std::fs::read_to_string(path)?;
        for (i, line) in body.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or(ConfigError::BadLine { line: i + 1 })?;
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Canonical serialization: one key per line, fixed order.
    pub fn to_kv_string(&self) -> String {
        let mut out = String::new();
        for (key, value) in self.entries() {
            out.push_str(&format!("{key} = {value}\n"));
        }
        out
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("seed", self.seed.to_string()),
            ("templates", self.templates.clone()),
            ("providers", self.providers.to_string()),
            ("iterations", self.iterations.to_string()),
            ("workers", self.workers.to_string()),
            ("data.dir", self.data_dir.display().to_string()),
            (
                "data.plain",
                self.plain_data
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
            ),
            ("model.kind", self.model_kind.clone()),
            ("model.context", self.model_context.to_string()),
            ("model.embed", self.model_embed.to_string()),
            ("model.hidden", self.model_hidden.to_string()),
            ("decode.max-len", self.decode_max_len.to_string()),
            ("ift.epochs", self.ift_epochs.to_string()),
            ("ift.batch", self.ift_batch.to_string()),
            ("ift.lr", self.ift_lr.to_string()),
            ("dpo.beta", self.dpo_beta.to_string()),
            ("dpo.stage1.epochs", self.stage1_epochs.to_string()),
            ("dpo.stage1.lr", self.stage1_lr.to_string()),
            ("dpo.stage1.batch", self.stage1_batch.to_string()),
            ("dpo.task.epochs", self.task_epochs.to_string()),
            ("dpo.task.lr", self.task_lr.to_string()),
            ("dpo.task.batch", self.task_batch.to_string()),
            (
                "task.resplit-per-iteration",
                self.resplit_per_iteration.to_string(),
            ),
            ("ablation.diversity", self.diversity.clone()),
            (
                "ablation.sampling-temperature",
                self.sampling_temperature.to_string(),
            ),
            (
                "ablation.filtration",
                if self.filtration { "on" } else { "off" }.to_string(),
            ),
            ("sft.epochs", self.sft_epochs.to_string()),
            ("sft.lr", self.sft_lr.to_string()),
            ("sft.batch", self.sft_batch.to_string()),
        ]
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.diversity == "providers" && self.providers < 2 {
            return Err(ConfigError::Invalid(
                "provider diversity needs at least 2 providers (use ablation.diversity = sampling for one)"
                    .to_string(),
            ));
        }
        if self.providers < 1 {
            return Err(ConfigError::Invalid(
                "need at least one provider".to_string(),
            ));
        }
        if self.diversity == "sampling" && self.sampling_temperature <= 0.0 {
            return Err(ConfigError::Invalid(
                "sampling temperature must be positive".to_string(),
            ));
        }
        if self.model_kind == "kgram-mlp"
            && (self.model_context < 1 || self.model_embed < 1 || self.model_hidden < 1)
        {
            return Err(ConfigError::Invalid(
                "k-gram model dimensions must be at least 1".to_string(),
            ));
        }
        if self.decode_max_len < 1 {
            return Err(ConfigError::Invalid(
                "decode.max-len must be at least 1".to_string(),
            ));
        }
        Ok(())
    }
}

fn parse_bool(value: &str) -> Option<bool> {
    match value {
        "true" => Some(true),
        "false" => Some(false),
        _ => None,
    }
}
