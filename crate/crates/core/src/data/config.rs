//! Fully resolved run configuration, serialised as JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::PyramidConfig;
use crate::reasoning::{ModelShape, ReasoningConfig};
use crate::scalar::DType;
use crate::training::{BatchSpec, OptimizerConfig, TrainSchedule};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub pyramid: PyramidConfig,
    #[serde(default)]
    pub reasoning: ReasoningConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub batch: BatchSpec,
    #[serde(default)]
    pub schedule: TrainSchedule,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_precision")]
    pub precision: DType,
}

fn default_precision() -> DType {
    DType::F64
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            pyramid: PyramidConfig::default(),
            reasoning: ReasoningConfig::default(),
            optimizer: OptimizerConfig::default(),
            batch: BatchSpec::default(),
            schedule: TrainSchedule::default(),
            seed: 0,
            precision: DType::F64,
        }
    }
}

impl RunConfig {
    pub fn model_shape(&self, channels: usize) -> ModelShape {
        ModelShape {
            channels,
            pyramid: self.pyramid.clone(),
            reasoning: self.reasoning.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_shape(1).validate()?;
        self.optimizer.validate()?;
        self.batch.validate()?;
        if self.schedule.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.schedule.steps_per_epoch == Some(0) {
            return Err(Error::Config("steps_per_epoch must be positive".into()));
        }
        if self.schedule.ks.is_empty() || self.schedule.ks.contains(&0) {
            return Err(Error::Config("report ks must be non-empty and positive".into()));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serialises")
    }

    /// Single comment line embedding the config, for plain-text artifacts.
    pub fn echo(&self) -> String {
        format!("# config {}", self.to_json())
    }
}
