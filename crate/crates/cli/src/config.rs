//! Run configuration: a JSON file with command-line overrides on top.

use std::fs;
use std::path::Path;

use delta_core::losses::LossWeights;
use delta_core::ModelConfig;
use delta_deltagen::dataset::DatasetConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Text-only language-model steps before stage 1.
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub stage1_steps: usize,
    pub stage1_lr: f64,
    pub stage2_steps: usize,
    pub stage2_lr: f64,
    /// Questions drawn from the sampled scene per step.
    pub samples_per_step: usize,
    pub weights: LossWeights,
    /// Groups tracked for gradients despite the stage plan; only for
    /// exercising the freezing check.
    pub fault_unfreeze: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            warmup_steps: 400,
            warmup_lr: 3e-3,
            stage1_steps: 400,
            stage1_lr: 1e-3,
            stage2_steps: 1200,
            stage2_lr: 3e-4,
            samples_per_step: 6,
            weights: LossWeights::default(),
            fault_unfreeze: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub max_new: usize,
    /// Non-segmentation test questions scored for QA metrics (evenly spaced); 0 skips QA.
    pub qa_samples: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            max_new: 48,
            qa_samples: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Optional question-rewriting service used by `gen`.
    pub rewrite_endpoint: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            rewrite_endpoint: None,
        }
    }
}

/// Flag values that override the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub scenes: Option<usize>,
    pub k: Option<usize>,
    pub no_cea: bool,
    pub no_cpe: bool,
    pub no_lca: bool,
    pub symmetric_queries: bool,
}

impl RunConfig {
    /// Reads a config file; a run manifest is accepted too and its
    /// resolved config is used.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let Some(p) = path else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        let bad = |e: serde_json::Error| CliError::Contract(format!("config {}: {e}", p.display()));
        let mut v: serde_json::Value = serde_json::from_str(&text).map_err(bad)?;
        if v.get("command").is_some() {
            if let Some(c) = v.get_mut("config") {
                v = c.take();
            }
        }
        serde_json::from_value(v).map_err(bad)
    }

    /// Applies `o` and propagates the shared settings: the seed and phase
    /// count drive both the dataset and the model, and the model follows the
    /// scene size and class count.
    pub fn resolve(mut self, o: &Overrides) -> Result<RunConfig> {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(n) = o.scenes {
            self.dataset.scenes = n;
        }
        if let Some(k) = o.k {
            self.dataset.scene.phases = k;
        }
        let m = &mut self.model.mechanisms;
        m.cea &= !o.no_cea;
        m.cpe &= !o.no_cpe;
        m.lca &= !o.no_lca;
        m.symmetric_queries |= o.symmetric_queries;
        self.dataset.seed = self.seed;
        self.model.phases = self.dataset.scene.phases;
        self.model.image_size = self.dataset.scene.size;
        self.model.n_categories = self.dataset.scene.classes;
        self.model.validate()?;
        self.dataset.validate()?;
        Ok(self)
    }

    /// Short name of the mechanism setting: `full`, `no-cea`, `no-cpe+no-lca`, ...
    pub fn label(&self) -> String {
        mechanism_label(&self.model)
    }
}

pub fn mechanism_label(model: &ModelConfig) -> String {
    let m = &model.mechanisms;
    let mut parts = Vec::new();
    if !m.cea {
        parts.push("no-cea");
    }
    if !m.cpe {
        parts.push("no-cpe");
    }
    if !m.lca {
        parts.push("no-lca");
    }
    if m.symmetric_queries {
        parts.push("symmetric");
    }
    if parts.is_empty() {
        "full".into()
    } else {
        parts.join("+")
    }
}
