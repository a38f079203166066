//! Run configuration: a flat `section.key = value` text file.
//!
//! Lines starting with `#` and blank lines are ignored. Every key is
//! optional; unknown or repeated keys are errors. [`RunConfig::to_text`]
//! writes every key in a fixed order, so parsing and re-dumping a file gives
//! its normalized form.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{MeerError, Result};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelPreset {
    Toy,
    Full,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub manifest: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub preset: ModelPreset,
    pub input_size: usize,
    pub embedding_dim: usize,
    pub mdm_on: bool,
    pub sc_count: usize,
    pub mis_on: bool,
    pub train: TrainConfig,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: None,
            pairs: None,
            preset: ModelPreset::Toy,
            input_size: 32,
            embedding_dim: 512,
            mdm_on: true,
            sc_count: 3,
            mis_on: true,
            train: TrainConfig::default(),
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Every accepted key, in dump order.
pub const CONFIG_KEYS: [&str; 29] = [
    "data.manifest",
    "data.pairs",
    "model.preset",
    "model.input_size",
    "model.embedding_dim",
    "model.mdm_on",
    "model.sc_count",
    "model.mis_on",
    "train.batch_size",
    "train.epochs",
    "train.lr_initial",
    "train.lr_floor",
    "train.lr_milestones",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.adam_eps",
    "train.seed",
    "train.masked_ratio",
    "train.stage2_pattern_loss",
    "train.debug_checks",
    "loss.lambda",
    "loss.alpha",
    "loss.beta",
    "loss.gamma",
    "loss.eta",
    "loss.arcface_scale",
    "loss.arcface_margin",
    "output.dir",
];

fn parse_value<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| MeerError::Config(format!("`{key}`: cannot parse `{raw}`")))
}

fn parse_bool(key: &str, raw: &str) -> Result<bool> {
    match raw {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(MeerError::Config(format!("`{key}`: expected true or false, got `{raw}`"))),
    }
}

fn opt_path(raw: &str) -> Option<PathBuf> {
    (!raw.is_empty()).then(|| PathBuf::from(raw))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| MeerError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if !CONFIG_KEYS.contains(&key) {
                return Err(MeerError::Config(format!("line {}: unknown key `{key}`", n + 1)));
            }
            if !seen.insert(key.to_string()) {
                return Err(MeerError::Config(format!("line {}: key `{key}` given twice", n + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| MeerError::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config(1)?;
        self.train.validate()
    }

    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let w = &mut t.weights;
        match key {
            "data.manifest" => self.manifest = opt_path(v),
            "data.pairs" => self.pairs = opt_path(v),
            "model.preset" => {
                self.preset = match v {
                    "toy" => ModelPreset::Toy,
                    "full" => ModelPreset::Full,
                    _ => return Err(MeerError::Config(format!("`model.preset`: expected toy or full, got `{v}`"))),
                }
            }
            "model.input_size" => self.input_size = parse_value(key, v)?,
            "model.embedding_dim" => self.embedding_dim = parse_value(key, v)?,
            "model.mdm_on" => self.mdm_on = parse_bool(key, v)?,
            "model.sc_count" => self.sc_count = parse_value(key, v)?,
            "model.mis_on" => self.mis_on = parse_bool(key, v)?,
            "train.batch_size" => t.batch_size = parse_value(key, v)?,
            "train.epochs" => t.epochs = parse_value(key, v)?,
            "train.lr_initial" => t.lr_initial = parse_value(key, v)?,
            "train.lr_floor" => t.lr_floor = parse_value(key, v)?,
            "train.lr_milestones" => {
                t.lr_milestones = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_value(key, s))
                    .collect::<Result<_>>()?
            }
            "train.weight_decay" => t.weight_decay = parse_value(key, v)?,
            "train.beta1" => t.beta1 = parse_value(key, v)?,
            "train.beta2" => t.beta2 = parse_value(key, v)?,
            "train.adam_eps" => t.adam_eps = parse_value(key, v)?,
            "train.seed" => t.seed = parse_value(key, v)?,
            "train.masked_ratio" => t.masked_ratio = parse_value(key, v)?,
            "train.stage2_pattern_loss" => t.stage2_pattern_loss = parse_bool(key, v)?,
            "train.debug_checks" => t.debug_checks = parse_bool(key, v)?,
            "loss.lambda" => w.lambda = parse_value(key, v)?,
            "loss.alpha" => w.alpha = parse_value(key, v)?,
            "loss.beta" => w.beta = parse_value(key, v)?,
            "loss.gamma" => w.gamma = parse_value(key, v)?,
            "loss.eta" => w.eta = parse_value(key, v)?,
            "loss.arcface_scale" => w.arcface_scale = parse_value(key, v)?,
            "loss.arcface_margin" => w.arcface_margin = parse_value(key, v)?,
            "output.dir" => self.output_dir = PathBuf::from(v),
            _ => return Err(MeerError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        let t = &self.train;
        let w = &t.weights;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "data.manifest" => path(&self.manifest),
            "data.pairs" => path(&self.pairs),
            "model.preset" => match self.preset {
                ModelPreset::Toy => "toy".into(),
                ModelPreset::Full => "full".into(),
            },
            "model.input_size" => self.input_size.to_string(),
            "model.embedding_dim" => self.embedding_dim.to_string(),
            "model.mdm_on" => self.mdm_on.to_string(),
            "model.sc_count" => self.sc_count.to_string(),
            "model.mis_on" => self.mis_on.to_string(),
            "train.batch_size" => t.batch_size.to_string(),
            "train.epochs" => t.epochs.to_string(),
            "train.lr_initial" => t.lr_initial.to_string(),
            "train.lr_floor" => t.lr_floor.to_string(),
            "train.lr_milestones" => t.lr_milestones.iter().map(|m| m.to_string()).collect::<Vec<_>>().join(","),
            "train.weight_decay" => t.weight_decay.to_string(),
            "train.beta1" => t.beta1.to_string(),
            "train.beta2" => t.beta2.to_string(),
            "train.adam_eps" => t.adam_eps.to_string(),
            "train.seed" => t.seed.to_string(),
            "train.masked_ratio" => t.masked_ratio.to_string(),
            "train.stage2_pattern_loss" => t.stage2_pattern_loss.to_string(),
            "train.debug_checks" => t.debug_checks.to_string(),
            "loss.lambda" => w.lambda.to_string(),
            "loss.alpha" => w.alpha.to_string(),
            "loss.beta" => w.beta.to_string(),
            "loss.gamma" => w.gamma.to_string(),
            "loss.eta" => w.eta.to_string(),
            "loss.arcface_scale" => w.arcface_scale.to_string(),
            "loss.arcface_margin" => w.arcface_margin.to_string(),
            "output.dir" => self.output_dir.display().to_string(),
            _ => unreachable!("key list and accessor disagree on `{key}`"),
        }
    }

    /// Canonical form: every key, one per line, in [`CONFIG_KEYS`] order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(s, "{key} = {}", self.get(key));
        }
        s
    }

    /// Network configuration for a dataset with `num_identities` classes.
    pub fn model_config(&self, num_identities: usize) -> Result<ModelConfig> {
        let base = match self.preset {
            ModelPreset::Toy => ModelConfig::toy(num_identities),
            ModelPreset::Full => ModelConfig::full(num_identities),
        };
        let cfg = ModelConfig {
            input_size: self.input_size,
            embedding_dim: self.embedding_dim,
            mdm_on: self.mdm_on,
            sc_count: self.sc_count,
            mis_on: self.mis_on,
            ..base
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Parses and re-dumps a config file's text.
pub fn normalize(text: &str) -> Result<String> {
    Ok(RunConfig::parse(text)?.to_text())
}
