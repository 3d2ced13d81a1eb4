//! Run configuration files: flat `key = value` lines, `#` starts a comment.
//!
//! Model keys (`preset`, `scale`, `channels`, ...) build the network. Training
//! keys pick a `recipe` (`lkdn`, `lkdn-s` or `custom`); `steps`, `lr`, `loss`,
//! `batch_size` and `lr_patch` override it with a single stage.

use std::fs;
use std::path::{Path, PathBuf};

use lkdn_core::optim::{LossKind, OptimizerKind, Stage};
use lkdn_core::LkdnConfig;

use crate::error::{CliError, Result};

const MODEL_KEYS: [&str; 9] = [
    "preset",
    "scale",
    "num_blocks",
    "channels",
    "attention_channels",
    "input_replication",
    "refinement_variant",
    "upsampler_reparam",
    "fused",
];

/// One constant-rate stage with its batch geometry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StagePlan {
    pub stage: Stage,
    pub batch_size: usize,
    /// LR patch side; the HR side is this times the scale.
    pub lr_patch: usize,
}

/// Where HR training images come from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TrainData {
    Directory(PathBuf),
    /// Procedurally generated images, `count` of `size`×`size`.
    Synthetic { count: usize, size: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: LkdnConfig,
    pub data: TrainData,
    /// Held-out HR images for validation. Defaults to the last
    /// `val_count` training images.
    pub val_dir: Option<PathBuf>,
    pub val_count: usize,
    pub stages: Vec<StagePlan>,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub out_dir: PathBuf,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Batches prepared ahead of the training thread.
    pub prefetch: usize,
}

impl RunConfig {
    pub fn total_steps(&self) -> u64 {
        self.stages.iter().map(|s| s.stage.steps).sum()
    }

    /// Stage containing zero-based `step`.
    pub fn stage_at(&self, step: u64) -> Result<&StagePlan> {
        let mut start = 0;
        for s in &self.stages {
            if step < start + s.stage.steps {
                return Ok(s);
            }
            start += s.stage.steps;
        }
        Err(lkdn_core::Error::ScheduleExhausted {
            step,
            total: self.total_steps(),
        }
        .into())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            CliError::Usage(msg) => CliError::format(path, msg),
            CliError::Core(core) => CliError::format(path, core.to_string()),
            other => other,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let get = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        let model_pairs = pairs
            .iter()
            .filter(|(k, _)| MODEL_KEYS.contains(&k.as_str()))
            .map(|(k, v)| (k.as_str(), v.as_str()));
        let model = LkdnConfig::from_pairs(model_pairs)?;

        let recipe = get("recipe").unwrap_or("custom");
        let mut stages = match recipe {
            "lkdn" => recipe_lkdn(),
            "lkdn-s" | "lkdn_s" => recipe_lkdn_s(model.scale),
            "custom" => vec![StagePlan {
                stage: Stage {
                    steps: 1000,
                    lr: 5e-3,
                    loss: LossKind::L1,
                },
                batch_size: 16,
                lr_patch: 48,
            }],
            other => return Err(CliError::usage(format!("unknown recipe `{other}`"))),
        };
        let overrides = ["steps", "lr", "loss", "batch_size", "lr_patch"];
        if overrides.iter().any(|k| get(k).is_some()) {
            let mut s = stages[0];
            if let Some(v) = get("steps") {
                s.stage.steps = num(v, "steps")?;
            }
            if let Some(v) = get("lr") {
                s.stage.lr = v.trim().parse().map_err(|_| CliError::usage(format!("lr: bad number `{v}`")))?;
            }
            if let Some(v) = get("loss") {
                s.stage.loss = v.parse()?;
            }
            if let Some(v) = get("batch_size") {
                s.batch_size = num(v, "batch_size")?;
            }
            if let Some(v) = get("lr_patch") {
                s.lr_patch = num(v, "lr_patch")?;
            }
            stages = vec![s];
        }
        for s in &stages {
            if s.batch_size == 0 || s.lr_patch == 0 || !s.stage.lr.is_finite() || s.stage.lr <= 0.0 {
                return Err(CliError::usage("batch_size, lr_patch and lr must be positive"));
            }
        }

        let data = match (get("train_dir"), get("synthetic")) {
            (Some(_), Some(_)) => return Err(CliError::usage("set either train_dir or synthetic, not both")),
            (Some(dir), None) => TrainData::Directory(PathBuf::from(dir)),
            (None, Some(count)) => TrainData::Synthetic {
                count: num(count, "synthetic")?,
                size: get("synthetic_size").map(|v| num(v, "synthetic_size")).transpose()?.unwrap_or(128),
            },
            (None, None) => return Err(CliError::usage("missing train_dir (or synthetic = <count>)")),
        };

        let known = [
            "recipe", "steps", "lr", "loss", "batch_size", "lr_patch", "train_dir", "synthetic", "synthetic_size",
            "val_dir", "val_count", "optimizer", "seed", "out_dir", "eval_every", "checkpoint_every", "log_every",
            "prefetch",
        ];
        if let Some((k, _)) = pairs
            .iter()
            .find(|(k, _)| !known.contains(&k.as_str()) && !MODEL_KEYS.contains(&k.as_str()))
        {
            return Err(CliError::usage(format!("unknown key `{k}`")));
        }

        let opt_num = |key: &str, default: u64| -> Result<u64> { get(key).map(|v| num(v, key)).transpose().map(|v| v.unwrap_or(default)) };
        Ok(RunConfig {
            model,
            data,
            val_dir: get("val_dir").map(PathBuf::from),
            val_count: opt_num("val_count", 4)? as usize,
            stages,
            optimizer: get("optimizer").unwrap_or("adan").parse()?,
            seed: opt_num("seed", 0)?,
            out_dir: PathBuf::from(get("out_dir").unwrap_or("runs")),
            eval_every: opt_num("eval_every", 5000)?,
            checkpoint_every: opt_num("checkpoint_every", 5000)?,
            log_every: opt_num("log_every", 100)?,
            prefetch: opt_num("prefetch", 2)?.max(1) as usize,
        })
    }
}

/// Full LKDN recipe: batch 64, LR patch 48, 1e6 steps at 5e-3 under L1.
pub fn recipe_lkdn() -> Vec<StagePlan> {
    let stage = lkdn_core::optim::Schedule::lkdn().stages[0];
    vec![StagePlan {
        stage,
        batch_size: 64,
        lr_patch: 48,
    }]
}

/// LKDN-S recipe: batch 128 of 256px HR patches, then batch 64 of 480px.
pub fn recipe_lkdn_s(scale: usize) -> Vec<StagePlan> {
    let s = lkdn_core::optim::Schedule::lkdn_s();
    vec![
        StagePlan {
            stage: s.stages[0],
            batch_size: 128,
            lr_patch: 256 / scale,
        },
        StagePlan {
            stage: s.stages[1],
            batch_size: 64,
            lr_patch: 480 / scale,
        },
    ]
}

fn num<T: std::str::FromStr>(v: &str, key: &str) -> Result<T> {
    v.trim()
        .parse()
        .map_err(|_| CliError::usage(format!("{key}: expected a non-negative integer, got `{v}`")))
}

/// Splits a config file into ordered `(key, value)` pairs.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::usage(format!("line {}: expected `key = value`", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Builds a model config from a file that may also contain training keys.
pub fn load_model_config(path: &Path) -> Result<LkdnConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::input(path, e))?;
    let pairs = parse_pairs(&text).map_err(|e| CliError::format(path, e.to_string()))?;
    let model = pairs
        .iter()
        .filter(|(k, _)| MODEL_KEYS.contains(&k.as_str()))
        .map(|(k, v)| (k.as_str(), v.as_str()));
    LkdnConfig::from_pairs(model).map_err(|e| CliError::format(path, e.to_string()))
}
