//! Flat `key = value` run configuration with dotted section prefixes.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::backbone::BackboneConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Self::F32),
            "f64" => Ok(Self::F64),
            other => Err(Error::Config(format!("precision must be f32 or f64, got {other:?}"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::F32 => "f32",
            Self::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Dataset root holding `frames/` and `annotations/`.
    pub data_root: Option<PathBuf>,
    pub val_root: Option<PathBuf>,
    pub precision: Precision,
    /// Evaluate videos sequentially instead of in parallel.
    pub deterministic: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data_root: None,
            val_root: None,
            precision: Precision::F32,
            deterministic: true,
        }
    }
}

/// Every accepted key, in serialization order.
pub const KEYS: &[&str] = &[
    "backbone.stages",
    "backbone.base_width",
    "backbone.input_size",
    "backbone.bn_eps",
    "backbone.bn_momentum",
    "backbone.freeze",
    "cbam.enabled",
    "cbam.reduction",
    "cbam.kernel_size",
    "sequence.hidden_size",
    "sequence.head_hidden",
    "train.learning_rate",
    "train.momentum",
    "train.clips_per_batch",
    "train.checkpoint_every",
    "train.max_iterations",
    "train.seed",
    "train.grad_clip",
    "data.root",
    "data.val_root",
    "run.precision",
    "run.deterministic",
];

fn parse_value<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Desk-scale model for smoke runs and tests.
    pub fn tiny() -> Self {
        Self {
            model: ModelConfig::tiny(),
            ..Default::default()
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let b = &mut self.model.backbone;
        match key {
            "backbone.stages" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|s| parse_value(key, s.trim()))
                    .collect::<Result<_>>()?;
                b.stage_blocks = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("{key}: expected four comma-separated counts")))?;
            }
            "backbone.base_width" => b.base_width = parse_value(key, value)?,
            "backbone.input_size" => b.input_size = parse_value(key, value)?,
            "backbone.bn_eps" => b.bn_eps = parse_value(key, value)?,
            "backbone.bn_momentum" => b.bn_momentum = parse_value(key, value)?,
            "backbone.freeze" => self.model.freeze_backbone = parse_value(key, value)?,
            "cbam.enabled" => b.cbam.enabled = parse_value(key, value)?,
            "cbam.reduction" => b.cbam.reduction = parse_value(key, value)?,
            "cbam.kernel_size" => b.cbam.kernel_size = parse_value(key, value)?,
            "sequence.hidden_size" => self.model.hidden_size = parse_value(key, value)?,
            "sequence.head_hidden" => self.model.head_hidden = parse_value(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse_value(key, value)?,
            "train.momentum" => self.train.momentum = parse_value(key, value)?,
            "train.clips_per_batch" => self.train.clips_per_batch = parse_value(key, value)?,
            "train.checkpoint_every" => self.train.checkpoint_every = parse_value(key, value)?,
            "train.max_iterations" => self.train.max_iterations = parse_value(key, value)?,
            "train.seed" => self.train.seed = parse_value(key, value)?,
            "train.grad_clip" => self.train.grad_clip = parse_value(key, value)?,
            "data.root" => self.data_root = parse_path(value),
            "data.val_root" => self.val_root = parse_path(value),
            "run.precision" => self.precision = value.parse()?,
            "run.deterministic" => self.deterministic = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let b = &self.model.backbone;
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        Some(match key {
            "backbone.stages" => b.stage_blocks.map(|n| n.to_string()).join(","),
            "backbone.base_width" => b.base_width.to_string(),
            "backbone.input_size" => b.input_size.to_string(),
            "backbone.bn_eps" => b.bn_eps.to_string(),
            "backbone.bn_momentum" => b.bn_momentum.to_string(),
            "backbone.freeze" => self.model.freeze_backbone.to_string(),
            "cbam.enabled" => b.cbam.enabled.to_string(),
            "cbam.reduction" => b.cbam.reduction.to_string(),
            "cbam.kernel_size" => b.cbam.kernel_size.to_string(),
            "sequence.hidden_size" => self.model.hidden_size.to_string(),
            "sequence.head_hidden" => self.model.head_hidden.to_string(),
            "train.learning_rate" => self.train.learning_rate.to_string(),
            "train.momentum" => self.train.momentum.to_string(),
            "train.clips_per_batch" => self.train.clips_per_batch.to_string(),
            "train.checkpoint_every" => self.train.checkpoint_every.to_string(),
            "train.max_iterations" => self.train.max_iterations.to_string(),
            "train.seed" => self.train.seed.to_string(),
            "train.grad_clip" => self.train.grad_clip.to_string(),
            "data.root" => path(&self.data_root),
            "data.val_root" => path(&self.val_root),
            "run.precision" => self.precision.to_string(),
            "run.deterministic" => self.deterministic.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; a repeated key keeps its last value.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| e.context(format!("line {}", n + 1)))?;
        }
        Ok(())
    }

    /// Parses a full config; missing keys keep their defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.train.validate()
    }

    /// Canonical text: every key in [`KEYS`] order. `parse(to_text())`
    /// reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).unwrap_or_default());
        }
        out
    }

    pub fn backbone(&self) -> &BackboneConfig {
        &self.model.backbone
    }
}
