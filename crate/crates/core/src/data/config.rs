use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::divergence::DivergenceKind;
use crate::error::{Error, Result};
use crate::scoring::OodScoreKind;

/// Synthetic dataset dimensions used by the image pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineData {
    pub classes: usize,
    pub image_size: usize,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for PipelineData {
    fn default() -> Self {
        Self {
            classes: 3,
            image_size: 32,
            n_train: 96,
            n_test: 24,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Number of squeeze operations; image sides must be divisible by 2^levels.
    pub levels: usize,
    /// Normalisation + coupling pairs per resolution.
    pub steps_per_level: usize,
    pub hidden: usize,
    /// Side of the square inlier crops used for flow pre-training.
    pub crop: usize,
    pub pretrain_epochs: usize,
    pub lr: f64,
    pub joint_lr: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            levels: 2,
            steps_per_level: 2,
            hidden: 24,
            crop: 16,
            pretrain_epochs: 3,
            lr: 1e-3,
            joint_lr: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierConfig {
    pub width: usize,
    pub pretrain_epochs: usize,
    pub lr: f64,
    pub joint_lr: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            width: 12,
            pretrain_epochs: 5,
            lr: 2e-3,
            joint_lr: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointConfig {
    pub epochs: usize,
    /// Weight of the negative-pixel loss, shared by both models.
    pub lambda: f64,
    pub patch_min: usize,
    pub patch_max: usize,
    pub loss: DivergenceKind,
    /// Cosine schedule floor.
    pub lr_floor: f64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            lambda: 0.3,
            patch_min: 8,
            patch_max: 16,
            loss: DivergenceKind::Js,
            lr_floor: 1e-7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoreConfig {
    pub kind: OodScoreKind,
    /// Temperature for divergence-based scores.
    pub temperature: f64,
    /// Temperature for the max-softmax score.
    pub msp_temperature: f64,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        Self {
            kind: OodScoreKind::Jsd,
            temperature: RunConfig::PAPER_TEMPERATURE,
            msp_temperature: 10.0,
        }
    }
}

impl ScoreConfig {
    pub fn temperature_for(&self, kind: OodScoreKind) -> f64 {
        match kind {
            OodScoreKind::Msp => self.msp_temperature,
            OodScoreKind::MaxLogit => 1.0,
            _ => self.temperature,
        }
    }
}

/// Resolved run configuration, stored as TOML beside every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub data: PipelineData,
    pub flow: FlowConfig,
    pub classifier: ClassifierConfig,
    pub joint: JointConfig,
    pub score: ScoreConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            batch_size: 8,
            data: PipelineData::default(),
            flow: FlowConfig::default(),
            classifier: ClassifierConfig::default(),
            joint: JointConfig::default(),
            score: ScoreConfig::default(),
        }
    }
}

impl RunConfig {
    /// Negative-loss weight used for full-scale road-driving training.
    pub const PAPER_LAMBDA: f64 = 3e-2;
    /// Inference temperature for divergence-based scores.
    pub const PAPER_TEMPERATURE: f64 = 2.0;
    /// Patch side range for road-driving scenes.
    pub const PAPER_PATCH_ROAD: (usize, usize) = (16, 216);
    /// Patch side range for aerial scenes.
    pub const PAPER_PATCH_AERIAL: (usize, usize) = (16, 64);
    /// Stage-one classifier learning rate (feature extractor).
    pub const PAPER_CLS_LR: f64 = 1e-4;
    /// Flow learning rate (Adamax).
    pub const PAPER_FLOW_LR: f64 = 1e-6;
    /// Cosine schedule floor.
    pub const PAPER_LR_FLOOR: f64 = 1e-7;

    /// Hyperparameters of the full-scale road-driving setup.
    pub fn paper_defaults() -> Self {
        let mut c = Self::default();
        c.joint.lambda = Self::PAPER_LAMBDA;
        c.joint.patch_min = Self::PAPER_PATCH_ROAD.0;
        c.joint.patch_max = Self::PAPER_PATCH_ROAD.1;
        c.joint.lr_floor = Self::PAPER_LR_FLOOR;
        c.score.temperature = Self::PAPER_TEMPERATURE;
        c.classifier.lr = Self::PAPER_CLS_LR;
        c.flow.joint_lr = Self::PAPER_FLOW_LR;
        c.batch_size = 16;
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.joint.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if !(self.score.temperature > 0.0) || !(self.score.msp_temperature > 0.0) {
            return bad("temperature must be positive");
        }
        if self.joint.patch_min < 1 || self.joint.patch_min > self.joint.patch_max {
            return bad("patch range must satisfy 1 <= min <= max");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if self.data.classes < 2 {
            return bad("at least two classes are required");
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Write the resolved config as `config.toml` inside `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml_string()?)?;
        Ok(())
    }
}
