use std::fs;
use std::path::Path;

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};

use cscpr::dataset::{GenerationConfig, Thresholds, DEFAULT_NEGATIVE_CAP, DEFAULT_VOXEL};
use cscpr::eval::EvalConfig;
use cscpr::kernels::ModelConfig;
use cscpr::learning::ToyTrainConfig;
use cscpr::synthetic::PackConfig;

pub const RUN_CONFIG_SCHEMA: &str = "cscpr-run/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelSettings {
    pub thresholds: Thresholds,
    pub voxel_size: f64,
    pub negative_cap: usize,
}

impl Default for LabelSettings {
    fn default() -> Self {
        LabelSettings {
            thresholds: Thresholds::default(),
            voxel_size: DEFAULT_VOXEL,
            negative_cap: DEFAULT_NEGATIVE_CAP,
        }
    }
}

/// Everything that determines a run's artifacts. Files may give any subset;
/// missing fields take their defaults and command-line flags win over both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub schema: String,
    pub seed: u64,
    pub labels: LabelSettings,
    pub synthetic: PackConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
    pub train: ToyTrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema: RUN_CONFIG_SCHEMA.into(),
            seed: 0,
            labels: LabelSettings::default(),
            synthetic: PackConfig::default(),
            model: ModelConfig::default(),
            eval: EvalConfig::default(),
            train: ToyTrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| cscpr::Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| cscpr::Error::Format {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        if cfg.schema != RUN_CONFIG_SCHEMA {
            bail!(cscpr::Error::Format {
                path: path.to_path_buf(),
                reason: format!("schema is {:?}, expected {RUN_CONFIG_SCHEMA:?}", cfg.schema),
            });
        }
        Ok(cfg)
    }

    /// Copies the run seed into every seeded component.
    pub fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synthetic.seed = seed;
        self.eval.ransac.seed = seed;
    }

    pub fn generation(&self) -> GenerationConfig {
        GenerationConfig {
            thresholds: self.labels.thresholds,
            voxel_size: self.labels.voxel_size,
            negative_cap: self.labels.negative_cap,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.labels.thresholds.validate()?;
        self.model.validate().context("model config")?;
        self.eval.validate().context("eval config")?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("run config serializes")
    }
}
