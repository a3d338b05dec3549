//! Strict JSON run configuration: unknown keys are rejected with the path to
//! the offending key, defaults are materialized, and the effective config is
//! echoed into the run directory.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::diffusion::{DatasetKind, ScheduleKind};
use crate::error::{Error, Result};
use crate::train::TrainConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub dim: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { kind: DatasetKind::MixtureOfGaussians, dim: 2, n_classes: 4, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleConfig {
    pub t_max: usize,
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { t_max: 100, kind: ScheduleKind::Linear, beta_min: 1e-3, beta_max: 0.15 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetSection {
    pub hidden: usize,
    pub t_dim: usize,
    pub blocks: usize,
}

impl Default for NetSection {
    fn default() -> Self {
        Self { hidden: 48, t_dim: 8, blocks: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { iters: 3000, batch: 32, lr: 2e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    /// Skipping step on the timestep grid.
    pub k: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self { iters: 3000, batch: 32, lr: 1e-3, k: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    /// `target_region`, `quantized`, or `classifier`.
    pub kind: String,
    /// Quantization levels (quantized kind only).
    pub levels: usize,
    pub classifier_hidden: usize,
    pub classifier_iters: usize,
    pub classifier_lr: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            kind: "target_region".into(),
            levels: 4,
            classifier_hidden: 24,
            classifier_iters: 500,
            classifier_lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub head_hidden: usize,
    pub pretrain_iters: usize,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self { head_hidden: 24, pretrain_iters: 1500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalyzeConfig {
    pub epsilon: f64,
    pub n: usize,
    pub t_levels: Vec<usize>,
    pub h_list: Vec<usize>,
    pub draws: usize,
    pub projections: usize,
    pub gamma: f64,
    pub td_traces: usize,
}

impl Default for AnalyzeConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.01,
            n: 1000,
            t_levels: vec![2, 5, 10, 20, 50],
            h_list: vec![1, 2, 4, 8],
            draws: 1000,
            projections: 128,
            gamma: 0.0,
            td_traces: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct IoConfig {
    pub run_dir: Option<String>,
    /// Real wall-clock times in metrics break the bit-identical-streams
    /// determinism contract, so they are off unless asked for.
    pub record_wall_time: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Total sampler-update steps.
    pub steps: usize,
    /// Intermediate checkpoints kept for the tradeoff report.
    pub checkpoints: usize,
    /// Samples per reward evaluation at checkpoints.
    pub eval_samples: usize,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self { steps: 400, checkpoints: 5, eval_samples: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleConfig,
    pub net: NetSection,
    pub teacher: TeacherConfig,
    pub distill: DistillConfig,
    pub reward: RewardConfig,
    pub surrogate: SurrogateConfig,
    pub train: TrainConfig,
    pub finetune: FinetuneConfig,
    pub analyze: AnalyzeConfig,
    pub io: IoConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            dataset: DatasetConfig::default(),
            schedule: ScheduleConfig::default(),
            net: NetSection::default(),
            teacher: TeacherConfig::default(),
            distill: DistillConfig::default(),
            reward: RewardConfig::default(),
            surrogate: SurrogateConfig::default(),
            train: TrainConfig::default(),
            finetune: FinetuneConfig::default(),
            analyze: AnalyzeConfig::default(),
            io: IoConfig::default(),
            seed: 0,
        }
    }
}

/// Allowed keys per config section. A `*` entry marks a scalar section whose
/// value carries no nested keys to check.
fn schema() -> BTreeMap<&'static str, Vec<&'static str>> {
    let mut m = BTreeMap::new();
    m.insert("schema_version", vec![]);
    m.insert("seed", vec![]);
    m.insert("dataset", vec!["kind", "dim", "n_classes", "seed"]);
    m.insert("schedule", vec!["t_max", "kind", "beta_min", "beta_max"]);
    m.insert("net", vec!["hidden", "t_dim", "blocks"]);
    m.insert("teacher", vec!["iters", "batch", "lr"]);
    m.insert("distill", vec!["iters", "batch", "lr", "k"]);
    m.insert(
        "reward",
        vec!["kind", "levels", "classifier_hidden", "classifier_iters", "classifier_lr"],
    );
    m.insert("surrogate", vec!["head_hidden", "pretrain_iters"]);
    m.insert(
        "train",
        vec![
            "n_s", "n1", "n2", "c", "c1", "c2", "eta", "eta1", "eta2", "mu",
            "buffer_capacity", "optimizer", "temperature", "distill_batch",
        ],
    );
    m.insert("finetune", vec!["steps", "checkpoints", "eval_samples"]);
    m.insert(
        "analyze",
        vec!["epsilon", "n", "t_levels", "h_list", "draws", "projections", "gamma", "td_traces"],
    );
    m.insert("io", vec!["run_dir", "record_wall_time"]);
    m
}

fn check_keys(doc: &Value) -> Result<()> {
    let obj = doc.as_object().ok_or_else(|| Error::ConfigValidation {
        path: "<root>".into(),
        message: "config must be a JSON object".into(),
    })?;
    let schema = schema();
    for (key, value) in obj {
        let Some(children) = schema.get(key.as_str()) else {
            return Err(Error::ConfigValidation {
                path: key.clone(),
                message: "unknown key".into(),
            });
        };
        if children.is_empty() {
            continue;
        }
        let Some(section) = value.as_object() else {
            return Err(Error::ConfigValidation {
                path: key.clone(),
                message: "expected a JSON object".into(),
            });
        };
        for child in section.keys() {
            if !children.contains(&child.as_str()) {
                return Err(Error::ConfigValidation {
                    path: format!("{key}.{child}"),
                    message: "unknown key".into(),
                });
            }
        }
    }
    Ok(())
}

/// Parse and validate a config document, materializing all defaults.
pub fn parse_config_str(text: &str) -> Result<RunConfig> {
    let doc: Value = serde_json::from_str(text)?;
    check_keys(&doc)?;
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| Error::ConfigValidation {
        path: "<document>".into(),
        message: e.to_string(),
    })?;
    validate_config(&cfg)?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text)
}

/// Serialize with all defaults materialized.
pub fn emit_config(cfg: &RunConfig) -> String {
    serde_json::to_string_pretty(cfg).expect("config serialization is infallible")
}

fn validate_config(cfg: &RunConfig) -> Result<()> {
    if cfg.schema_version != SCHEMA_VERSION {
        return Err(Error::ConfigValidation {
            path: "schema_version".into(),
            message: format!("expected {SCHEMA_VERSION}, got {}", cfg.schema_version),
        });
    }
    cfg.train.validate().map_err(|e| Error::ConfigValidation {
        path: "train".into(),
        message: e.to_string(),
    })?;
    if !matches!(cfg.reward.kind.as_str(), "target_region" | "quantized" | "classifier") {
        return Err(Error::ConfigValidation {
            path: "reward.kind".into(),
            message: format!("unknown reward kind `{}`", cfg.reward.kind),
        });
    }
    if cfg.distill.k == 0 || cfg.schedule.t_max % cfg.distill.k != 0 {
        return Err(Error::ConfigValidation {
            path: "distill.k".into(),
            message: format!("k must divide t_max = {}", cfg.schedule.t_max),
        });
    }
    Ok(())
}
