//! Flat `key = value` run configuration files: `#` comments, blank lines
//! ignored, unknown keys rejected. Hosts the architecture and training
//! hyperparameters plus all file paths one run needs.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::OptimConfig;

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub train_path: PathBuf,
    pub valid_path: PathBuf,
    pub test_path: Option<PathBuf>,
    pub vocab_path: PathBuf,
    /// Base path; training writes `<base>.best` and `<base>.final`.
    pub checkpoint_path: PathBuf,
    pub resume_from: Option<PathBuf>,

    pub context_window: usize,
    pub embed_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub memory_at: BTreeSet<usize>,
    pub memory_order: usize,

    pub optim: OptimConfig,
    pub batch_size: usize,
    pub max_epochs: u64,
    pub seed: u64,
    pub log_interval: usize,
}

impl RunConfig {
    /// Model architecture for a known vocabulary size.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            context_window: self.context_window,
            embed_dim: self.embed_dim,
            hidden_dims: self.hidden_dims.clone(),
            memory_at: self.memory_at.clone(),
            memory_order: self.memory_order,
        }
    }

    pub fn parse_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        RunConfig::parse(&text, base)
    }

    /// Relative paths resolve against `base` (the config file's directory).
    pub fn parse(text: &str, base: &Path) -> Result<RunConfig> {
        let mut map: HashMap<String, String> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = k.trim().to_string();
            if map.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Config(format!("duplicate key {key}")));
            }
        }

        const KNOWN: &[&str] = &[
            "train", "valid", "test", "vocab", "checkpoint", "resume_from",
            "context_window", "embed_dim", "hidden_dims", "memory_at", "memory_order",
            "lr_weights", "lr_taps", "momentum", "weight_decay", "regularize_taps",
            "batch_size", "max_epochs", "seed", "log_interval",
        ];
        for key in map.keys() {
            if !KNOWN.contains(&key.as_str()) {
                return Err(Error::Config(format!("unknown key {key}")));
            }
        }

        let path_of = |key: &str| -> Result<PathBuf> {
            let v = map
                .get(key)
                .ok_or_else(|| Error::Config(format!("missing key {key}")))?;
            Ok(base.join(v))
        };
        let opt_path = |key: &str| map.get(key).map(|v| base.join(v));
        let num = |key: &str, default: Option<&str>| -> Result<String> {
            match map.get(key) {
                Some(v) => Ok(v.clone()),
                None => default
                    .map(str::to_string)
                    .ok_or_else(|| Error::Config(format!("missing key {key}"))),
            }
        };
        fn parse<T: std::str::FromStr>(s: &str, key: &str) -> Result<T> {
            s.parse()
                .map_err(|_| Error::Config(format!("bad value {s:?} for {key}")))
        }

        let hidden_dims: Vec<usize> = num("hidden_dims", None)?
            .split(',')
            .map(|p| parse(p.trim(), "hidden_dims"))
            .collect::<Result<_>>()?;
        let memory_at_raw = num("memory_at", Some(""))?;
        let memory_at: BTreeSet<usize> = if memory_at_raw.trim().is_empty() {
            BTreeSet::new()
        } else {
            memory_at_raw
                .split(',')
                .map(|p| parse(p.trim(), "memory_at"))
                .collect::<Result<_>>()?
        };

        let optim = OptimConfig {
            lr_weights: parse(&num("lr_weights", Some("0.4"))?, "lr_weights")?,
            lr_taps: parse(&num("lr_taps", Some("0.002"))?, "lr_taps")?,
            momentum: parse(&num("momentum", Some("0"))?, "momentum")?,
            weight_decay: parse(&num("weight_decay", Some("0"))?, "weight_decay")?,
            regularize_taps: parse(&num("regularize_taps", Some("true"))?, "regularize_taps")?,
        };
        optim.validate()?;

        let config = RunConfig {
            train_path: path_of("train")?,
            valid_path: path_of("valid")?,
            test_path: opt_path("test"),
            vocab_path: path_of("vocab")?,
            checkpoint_path: path_of("checkpoint")?,
            resume_from: opt_path("resume_from"),
            context_window: parse(&num("context_window", Some("2"))?, "context_window")?,
            embed_dim: parse(&num("embed_dim", None)?, "embed_dim")?,
            hidden_dims,
            memory_at,
            memory_order: parse(&num("memory_order", Some("0"))?, "memory_order")?,
            optim,
            batch_size: parse(&num("batch_size", None)?, "batch_size")?,
            max_epochs: parse(&num("max_epochs", None)?, "max_epochs")?,
            seed: parse(&num("seed", Some("1"))?, "seed")?,
            log_interval: parse(&num("log_interval", Some("0"))?, "log_interval")?,
        };
        if config.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(config)
    }
}
