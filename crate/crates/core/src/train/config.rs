//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every key is
//! optional; [`RunConfig::resolved`] lists all keys with their effective
//! values. Lists are comma separated; an empty list is written `-`.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `seed` | 1 | network init, data, and batch order |
//! | `iterations` | 2000 | SGD steps |
//! | `batch_size` | 2 | volumes per step |
//! | `loss` | dsc | dsc, jaccard, dsc-nosquare, wce, ce |
//! | `grid` | 32x32x32 | synthetic volume dims (each divisible by 4) |
//! | `fg_max` | 0.02 | foreground fraction bound |
//! | `blobs` | 1,2 | ellipsoid count range |
//! | `radius` | 3,5 | ellipsoid semi-axis range (voxels) |
//! | `contrast` | 1 | foreground intensity |
//! | `noise` | 1 | Gaussian noise std |
//! | `bias` | 0.5 | bias-field amplitude |
//! | `deform` | true | elastic augmentation of training volumes |
//! | `deform_std` | 15 | displacement std at a 96-voxel extent |
//! | `deform_spacing` | 8 | control-point spacing (voxels) |
//! | `train_cases` | 16 | training pool size |
//! | `val_cases` | 4 | held-out validation volumes |
//! | `val_every` | 250 | iterations between validations (0 = end only) |
//! | `threshold` | 0.5 | probability binarization threshold |
//! | `widths` | 4,8,16 | stage channel widths |
//! | `block` | ddsp | none, ddsp, aspp |
//! | `dilation_rates` | 1,2,3,4 | dilated branches |
//! | `pooling_rates` | 2,4,6 | pyramid pooling branches |
//! | `growth` | 4 | channels per branch |
//! | `long_connection` | residual | none, residual, concat |
//! | `loss_weights` | 0.8,0.15,0.05 | main, stage-2, stage-3 weights |
//! | `fusion` | 1,0,0 | heads averaged at inference |
//! | `lr` | 0.001 | initial learning rate |
//! | `momentum` | 0.99 | |
//! | `weight_decay` | 0.005 | |
//! | `lr_decay_period` | 2000 | iterations between decays (0 = never) |
//! | `lr_decay_factor` | 0.2 | multiplier applied at each decay |

use std::fmt::Display;
use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use super::deform::DeformSpec;
use super::optim::OptimizerConfig;
use super::synth::SynthSpec;
use crate::losses::{LossKind, SupervisionWeights};
use crate::net::{BlockKind, DdspConfig, FusionMask, LongConnection, NetConfig};
use crate::volgrid::Dims;

pub const KEYS: &[&str] = &[
    "seed",
    "iterations",
    "batch_size",
    "loss",
    "grid",
    "fg_max",
    "blobs",
    "radius",
    "contrast",
    "noise",
    "bias",
    "deform",
    "deform_std",
    "deform_spacing",
    "train_cases",
    "val_cases",
    "val_every",
    "threshold",
    "widths",
    "block",
    "dilation_rates",
    "pooling_rates",
    "growth",
    "long_connection",
    "loss_weights",
    "fusion",
    "lr",
    "momentum",
    "weight_decay",
    "lr_decay_period",
    "lr_decay_factor",
];

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config keys: {}", .0.join(", "))]
    UnknownKeys(Vec<String>),
    #[error("key {key} given twice")]
    Duplicate { key: String },
    #[error("bad value for {key}: {value:?} ({reason})")]
    BadValue { key: String, value: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub iterations: u64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub synth: SynthSpec,
    pub deform: bool,
    pub train_cases: usize,
    pub val_cases: usize,
    pub val_every: u64,
    pub threshold: f64,
    pub net: NetConfig,
    pub optimizer: OptimizerConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            iterations: 2000,
            batch_size: 2,
            loss: LossKind::Dsc,
            synth: SynthSpec::default(),
            deform: true,
            train_cases: 16,
            val_cases: 4,
            val_every: 250,
            threshold: 0.5,
            net: NetConfig::default(),
            optimizer: OptimizerConfig::default(),
        }
    }
}

fn list<T: Display>(xs: &[T]) -> String {
    if xs.is_empty() {
        "-".to_string()
    } else {
        xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
    }
}

fn parse_list<T: FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: Display,
{
    let s = s.trim();
    if s == "-" || s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|t| t.trim().parse::<T>().map_err(|e| e.to_string())).collect()
}

fn parse_fixed<T: FromStr, const N: usize>(s: &str) -> Result<[T; N], String>
where
    T::Err: Display,
{
    let v = parse_list::<T>(s)?;
    let n = v.len();
    v.try_into().map_err(|_| format!("expected {N} values, got {n}"))
}

fn parse_grid(s: &str) -> Result<Dims, String> {
    let parts: Vec<usize> = s
        .split(['x', ','])
        .map(|t| t.trim().parse::<usize>().map_err(|e| e.to_string()))
        .collect::<Result<_, _>>()?;
    match parts[..] {
        [n] => Ok(Dims::cube(n)),
        [x, y, z] => Ok(Dims::new(x, y, z)),
        _ => Err("expected N or NxNxN".into()),
    }
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err("expected true or false".into()),
    }
}

impl RunConfig {
    /// Parse a config file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                text: raw.to_string(),
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        let unknown: Vec<String> = pairs
            .iter()
            .filter(|(k, _)| !KEYS.contains(&k.as_str()))
            .map(|(k, _)| k.clone())
            .collect();
        if !unknown.is_empty() {
            return Err(ConfigError::UnknownKeys(unknown));
        }
        let mut cfg = RunConfig::default();
        let mut seen: Vec<&str> = Vec::new();
        for (k, v) in &pairs {
            if seen.contains(&k.as_str()) {
                return Err(ConfigError::Duplicate { key: k.clone() });
            }
            seen.push(k);
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |reason: String| ConfigError::BadValue {
            key: key.to_string(),
            value: value.to_string(),
            reason,
        };
        fn num<T: FromStr>(v: &str) -> Result<T, String>
        where
            T::Err: Display,
        {
            v.parse::<T>().map_err(|e| e.to_string())
        }
        let r: Result<(), String> = (|| {
            match key {
                "seed" => self.seed = num(value)?,
                "iterations" => self.iterations = num(value)?,
                "batch_size" => self.batch_size = num(value)?,
                "loss" => self.loss = value.parse()?,
                "grid" => self.synth.dims = parse_grid(value)?,
                "fg_max" => self.synth.max_fg_fraction = num(value)?,
                "blobs" => {
                    let [a, b] = parse_fixed::<usize, 2>(value)?;
                    self.synth.blob_count = (a, b);
                }
                "radius" => {
                    let [a, b] = parse_fixed::<f64, 2>(value)?;
                    self.synth.blob_radius = (a, b);
                }
                "contrast" => self.synth.contrast = num(value)?,
                "noise" => self.synth.noise = num(value)?,
                "bias" => self.synth.bias = num(value)?,
                "deform" => self.deform = parse_bool(value)?,
                "deform_std" => self.synth.deform.std_at_96 = num(value)?,
                "deform_spacing" => self.synth.deform.control_spacing = num(value)?,
                "train_cases" => self.train_cases = num(value)?,
                "val_cases" => self.val_cases = num(value)?,
                "val_every" => self.val_every = num(value)?,
                "threshold" => self.threshold = num(value)?,
                "widths" => self.net.widths = parse_fixed::<usize, 3>(value)?,
                "block" => self.net.block = value.parse()?,
                "dilation_rates" => self.net.ddsp.dilation_rates = parse_list(value)?,
                "pooling_rates" => self.net.ddsp.pooling_rates = parse_list(value)?,
                "growth" => self.net.ddsp.growth = num(value)?,
                "long_connection" => self.net.long_connection = value.parse()?,
                "loss_weights" => {
                    let [a, b, c] = parse_fixed::<f64, 3>(value)?;
                    self.net.supervision = SupervisionWeights::new(a, b, c).map_err(|e| e.to_string())?;
                }
                "fusion" => self.net.fusion = value.parse()?,
                "lr" => self.optimizer.lr = num(value)?,
                "momentum" => self.optimizer.momentum = num(value)?,
                "weight_decay" => self.optimizer.weight_decay = num(value)?,
                "lr_decay_period" => self.optimizer.decay_period = num(value)?,
                "lr_decay_factor" => self.optimizer.decay_factor = num(value)?,
                other => return Err(format!("unknown key {other}")),
            }
            Ok(())
        })();
        r.map_err(bad)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: String| ConfigError::BadValue {
            key: key.to_string(),
            value: self.get(key),
            reason,
        };
        if self.batch_size == 0 {
            return Err(bad("batch_size", "must be positive".into()));
        }
        if self.train_cases == 0 || self.val_cases == 0 {
            return Err(bad("train_cases", "train and validation pools must be non-empty".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(bad("threshold", "must lie in (0, 1)".into()));
        }
        self.synth.validate().map_err(|e| bad("grid", e.to_string()))?;
        self.net.validate().map_err(|e| bad("block", e.to_string()))?;
        self.optimizer.validate().map_err(|e| bad("lr", e.to_string()))?;
        Ok(())
    }

    /// Current value of `key` in config-file syntax.
    pub fn get(&self, key: &str) -> String {
        let s = &self.synth;
        let n = &self.net;
        let o = &self.optimizer;
        match key {
            "seed" => self.seed.to_string(),
            "iterations" => self.iterations.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "loss" => self.loss.to_string(),
            "grid" => s.dims.to_string(),
            "fg_max" => s.max_fg_fraction.to_string(),
            "blobs" => format!("{},{}", s.blob_count.0, s.blob_count.1),
            "radius" => format!("{},{}", s.blob_radius.0, s.blob_radius.1),
            "contrast" => s.contrast.to_string(),
            "noise" => s.noise.to_string(),
            "bias" => s.bias.to_string(),
            "deform" => self.deform.to_string(),
            "deform_std" => s.deform.std_at_96.to_string(),
            "deform_spacing" => s.deform.control_spacing.to_string(),
            "train_cases" => self.train_cases.to_string(),
            "val_cases" => self.val_cases.to_string(),
            "val_every" => self.val_every.to_string(),
            "threshold" => self.threshold.to_string(),
            "widths" => list(&n.widths),
            "block" => n.block.to_string(),
            "dilation_rates" => list(&n.ddsp.dilation_rates),
            "pooling_rates" => list(&n.ddsp.pooling_rates),
            "growth" => n.ddsp.growth.to_string(),
            "long_connection" => n.long_connection.to_string(),
            "loss_weights" => list(&n.supervision.as_array()),
            "fusion" => list(&n.fusion.0.map(|b| b as u8)),
            "lr" => o.lr.to_string(),
            "momentum" => o.momentum.to_string(),
            "weight_decay" => o.weight_decay.to_string(),
            "lr_decay_period" => o.decay_period.to_string(),
            "lr_decay_factor" => o.decay_factor.to_string(),
            _ => String::new(),
        }
    }

    /// Every key with its effective value, in [`KEYS`] order.
    pub fn resolved(&self) -> serde_json::Map<String, serde_json::Value> {
        KEYS.iter()
            .map(|&k| (k.to_string(), serde_json::Value::String(self.get(k))))
            .collect()
    }

    /// Config-file text that parses back to this config.
    pub fn to_text(&self) -> String {
        KEYS.iter().map(|&k| format!("{k} = {}\n", self.get(k))).collect()
    }

    /// Synthesis spec for a configured grid with the case seed replaced.
    pub fn synth_for(&self, seed: u64) -> SynthSpec {
        self.synth.with_seed(seed)
    }

    pub fn deform_spec(&self) -> DeformSpec {
        self.synth.deform
    }

    pub fn with_block(mut self, block: BlockKind) -> Self {
        self.net.block = block;
        self
    }

    pub fn with_ddsp(mut self, ddsp: DdspConfig) -> Self {
        self.net.ddsp = ddsp;
        self
    }

    pub fn with_long_connection(mut self, lc: LongConnection) -> Self {
        self.net.long_connection = lc;
        self
    }

    pub fn with_fusion(mut self, fusion: FusionMask) -> Self {
        self.net.fusion = fusion;
        self
    }
}
