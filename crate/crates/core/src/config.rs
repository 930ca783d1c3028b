//! JSON run configuration shared by the command-line tools.
//!
//! Every section is optional and missing keys take the documented defaults;
//! unknown keys are rejected so a misspelled tolerance cannot silently fall
//! back to its default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cg::CgConfig;
use crate::error::{Error, Result};
use crate::synth::SyntheticTaskSpec;
use crate::tensor::Dims;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dims: DimsConfig,
    pub lambda: f64,
    pub cg: CgConfig,
    pub train: TrainSection,
    pub task: SyntheticTaskSpec,
    pub paths: PathsConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dims: DimsConfig::default(),
            lambda: 1.0,
            cg: CgConfig::default(),
            train: TrainSection::default(),
            task: SyntheticTaskSpec::default(),
            paths: PathsConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DimsConfig {
    #[serde(rename = "P")]
    pub pixels: usize,
    #[serde(rename = "L")]
    pub labels: usize,
    #[serde(rename = "D")]
    pub embed_dim: usize,
}

impl Default for DimsConfig {
    fn default() -> Self {
        DimsConfig {
            pixels: 256,
            labels: 3,
            embed_dim: 8,
        }
    }
}

/// [`TrainConfig`] without `lambda`, which lives at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub base_lr_unary: f64,
    pub base_lr_pairwise: f64,
    pub poly_power: f64,
    pub iters_per_phase: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub embed_init_std: f64,
    pub joint_finetune: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            base_lr_unary: t.base_lr_unary,
            base_lr_pairwise: t.base_lr_pairwise,
            poly_power: t.poly_power,
            iters_per_phase: t.iters_per_phase,
            batch_size: t.batch_size,
            seed: t.seed,
            embed_init_std: t.embed_init_std,
            joint_finetune: t.joint_finetune,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub model_dir: PathBuf,
    pub metrics_csv: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            model_dir: PathBuf::from("model"),
            metrics_csv: PathBuf::from("metrics.csv"),
        }
    }
}

/// Sizes and settings for the randomized gradient-check suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    #[serde(rename = "P")]
    pub pixels: usize,
    #[serde(rename = "L")]
    pub labels: usize,
    #[serde(rename = "D")]
    pub embed_dim: usize,
    pub instances: usize,
    pub seed: u64,
    pub fd_step: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            pixels: 8,
            labels: 3,
            embed_dim: 4,
            instances: 10,
            seed: 0,
            fd_step: crate::oracle::DEFAULT_FD_STEP,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    /// The effective configuration, defaults filled in.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        self.cg.validate()?;
        self.train_config().validate()?;
        self.task.validate()?;
        self.layer_dims()?;
        let g = &self.gradcheck;
        Dims::new(g.pixels, g.labels, g.embed_dim)?;
        if g.fd_step.is_nan() || g.fd_step <= 0.0 {
            return Err(Error::Config("gradcheck.fd_step must be positive".into()));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Result<Dims> {
        Dims::new(self.dims.pixels, self.dims.labels, self.dims.embed_dim)
    }

    /// Checks that `dims` agrees with the synthetic task.
    pub fn task_dims(&self) -> Result<Dims> {
        let dims = self.layer_dims()?;
        if dims.pixels != self.task.pixels() || dims.labels != self.task.labels {
            return Err(Error::Config(format!(
                "dims (P={}, L={}) disagree with task ({}x{} grid, {} labels)",
                dims.pixels, dims.labels, self.task.width, self.task.height, self.task.labels
            )));
        }
        Ok(dims)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            base_lr_unary: t.base_lr_unary,
            base_lr_pairwise: t.base_lr_pairwise,
            poly_power: t.poly_power,
            iters_per_phase: t.iters_per_phase,
            batch_size: t.batch_size,
            seed: t.seed,
            lambda: self.lambda,
            embed_init_std: t.embed_init_std,
            joint_finetune: t.joint_finetune,
        }
    }
}
