//! TOML configuration file with sections `[encoder]`, `[decoder]`,
//! `[train]`, `[data]` and `[ablation]`. Every key is optional.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::decoder::{BranchSet, DecoderConfig};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::pipeline::{AblationSpec, TrainConfig};

/// Environment variable naming the default dataset root.
pub const DATA_ROOT_ENV: &str = "SALFOM_DATA_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Dataset root; falls back to `$SALFOM_DATA_ROOT`.
    pub root: Option<PathBuf>,
    /// Frames and targets are resized to this `(H, W)`.
    pub input_size: [usize; 2],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { root: None, input_size: [224, 224] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Branches the model is built and trained with.
    pub branches: BranchSet,
    /// Variants run by `ablate`; empty means the seven branch subsets.
    pub variants: Vec<AblationSpec>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { branches: BranchSet::FULL, variants: Vec::new() }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AppConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub ablation: AblationConfig,
}

impl AppConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// A configuration small enough to train on a CPU in minutes: 64x64
    /// inputs cut into 8x8 patches, 4-frame windows, three decoder layers
    /// taking the 8x8 grid back to 64x64.
    pub fn desk_scale() -> Self {
        let frames = 4;
        let encoder = EncoderConfig { patch_size: 8, window_frames: frames, grid: [8, 8], ..EncoderConfig::default() };
        let mut decoder = DecoderConfig::with_layers(3, frames);
        decoder.window_size = [2, 4, 4];
        let train = TrainConfig { lr: 1e-3, val_every: 50, ..TrainConfig::default() };
        Self { encoder, decoder, train, data: DataConfig { root: None, input_size: [64, 64] }, ablation: AblationConfig::default() }
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            input_size: self.data.input_size,
            branches: self.ablation.branches,
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
        }
    }

    /// Collects every problem with the configuration.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(e) = self.model().validate() {
            match e {
                Error::Itemized(p) => problems.extend(p),
                e => problems.push(e.to_string()),
            }
        }
        if let Err(e) = self.train.validate() {
            match e {
                Error::Itemized(p) => problems.extend(p),
                e => problems.push(e.to_string()),
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Itemized(problems))
        }
    }

    /// The dataset root from the config or the environment.
    pub fn data_root(&self) -> Option<PathBuf> {
        self.data.root.clone().or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
    }
}
