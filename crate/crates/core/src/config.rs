//! Structured-text (TOML) configuration for training, data generation, and
//! the symmetry-recovery check.

use crate::losses::LossWeights;
use crate::synth::SceneSpec;
use crate::viewgen::ViewMix;
use crate::Error;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Supervision mode: which label kind the trainer consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Rbox,
    Hbox,
    Point,
    Mixed,
}

impl std::str::FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "rbox" => Ok(TrainMode::Rbox),
            "hbox" => Ok(TrainMode::Hbox),
            "point" => Ok(TrainMode::Point),
            "mixed" => Ok(TrainMode::Mixed),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Label-kind proportions for mixed-mode training (per-instance sampling).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct MixedFractions {
    pub point: f64,
    pub hbox: f64,
    pub rbox: f64,
}

impl Default for MixedFractions {
    fn default() -> Self {
        Self {
            point: 0.7,
            hbox: 0.3,
            rbox: 0.0,
        }
    }
}

/// Where the training data comes from.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetConfig {
    /// Procedurally generated scenes (deterministic from the seed).
    Synthetic {
        train_images: usize,
        test_images: usize,
        #[serde(default)]
        scene: SceneSpec,
    },
    /// On-disk dataset: per-split image directory plus annotation file.
    Dir {
        train_images: PathBuf,
        train_annotations: PathBuf,
        test_images: PathBuf,
        test_annotations: PathBuf,
    },
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig::Synthetic {
            train_images: 2000,
            test_images: 500,
            scene: SceneSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub channels: usize,
    pub fusion_scaling: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            channels: 32,
            fusion_scaling: true,
        }
    }
}

/// Full training configuration (TOML document).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_iters: u64,
    /// Fraction of total iterations after which the rate is divided by ten;
    /// zero disables the decay step.
    pub lr_decay_frac: f64,
    pub seed: u64,
    pub view_mode: ViewMix,
    /// Data-loading workers; determinism is guaranteed single-worker.
    pub workers: usize,
    /// Annotation noise level applied to degraded train labels.
    pub noise_sigma: f64,
    /// Random-rotation augmentation of the whole frame.
    pub random_rotation: bool,
    pub score_thresh: f64,
    pub nms_thresh: f64,
    /// Test images evaluated per epoch for the metrics log (0 = all); the
    /// final evaluation always uses the full test split.
    pub eval_images: usize,
    pub weights: LossWeights,
    pub model: ModelSection,
    pub mixed: MixedFractions,
    pub dataset: DatasetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Hbox,
            epochs: 8,
            batch_size: 2,
            learning_rate: 5e-5,
            weight_decay: 1e-4,
            warmup_iters: 500,
            lr_decay_frac: 0.9,
            seed: 0,
            view_mode: ViewMix::Unified,
            workers: 1,
            noise_sigma: 0.0,
            random_rotation: false,
            score_thresh: 0.3,
            nms_thresh: 0.1,
            eval_images: 150,
            weights: LossWeights::default(),
            model: ModelSection::default(),
            mixed: MixedFractions::default(),
            dataset: DatasetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_path(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

/// Configuration of the symmetry-recovery check: an angle-only network is
/// trained with consistency losses alone on single-object crops.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SymmetryConfig {
    pub train_objects: usize,
    pub holdout_objects: usize,
    /// Square crop size in pixels.
    pub crop: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Use asymmetric control shapes instead of symmetric ones.
    pub control: bool,
    /// Pass criterion: at least `pass_fraction` of held-out objects must
    /// have angular error below `error_threshold` (radians, mod pi/2).
    pub error_threshold: f64,
    pub pass_fraction: f64,
    pub long_min: f64,
    pub long_max: f64,
}

impl Default for SymmetryConfig {
    fn default() -> Self {
        Self {
            train_objects: 2000,
            holdout_objects: 500,
            crop: 48,
            steps: 8000,
            batch_size: 8,
            learning_rate: 1e-3,
            seed: 0,
            control: false,
            error_threshold: 0.1,
            pass_fraction: 0.9,
            long_min: 18.0,
            long_max: 38.0,
        }
    }
}

impl SymmetryConfig {
    pub fn from_path(path: &Path) -> Result<Self, Error> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}
