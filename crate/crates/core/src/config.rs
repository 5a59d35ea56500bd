//! Run configuration: every knob of a data-generation, training and
//! evaluation pipeline in one JSON document.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{read_json, write_json, DatasetConfig};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::synth::{default_scene, SceneSpec};
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// Dataset directory written by `gen-data`. `None` generates in memory.
    pub dir: Option<PathBuf>,
    pub dataset: DatasetConfig,
    pub sigma_px: f64,
    pub sigma_box: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        let scene = default_scene();
        Self { dir: None, dataset: DatasetConfig::default(), sigma_px: scene.sigma_px, sigma_box: scene.sigma_box }
    }
}

impl DataConfig {
    pub fn scene(&self) -> SceneSpec {
        SceneSpec { sigma_px: self.sigma_px, sigma_box: self.sigma_box, ..default_scene() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: ModelConfig,
    /// `train.seed` also seeds parameter initialisation.
    pub train: TrainConfig,
    pub data: DataConfig,
    /// Write an intermediate checkpoint every this many steps (0: stage end only).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            checkpoint_every: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        for (name, v) in [("sigma_px", self.data.sigma_px), ("sigma_box", self.data.sigma_box)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        let f = self.data.dataset.two_instrument_fraction;
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("two_instrument_fraction must lie in [0, 1], got {f}")));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding (fields in declaration order).
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cfg: Self = read_json(path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}
