//! Experiment configuration. Every field is required: the file on disk is the
//! whole configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use spindrop_core::dropout::{HyperParams, PlacementMode};
use spindrop_core::net::LenetSpec;
use spindrop_core::train::{LrSchedule, TrainConfig};
use spindrop_core::Strategy;

use crate::failure::Failure;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: LenetSpec,
    pub hyper: HyperParams,
    pub placement: PlacementMode,
    /// Crossbar mapping strategy, 1 or 2.
    pub strategy: u8,
    pub train: TrainSection,
    pub seeds: Seeds,
    pub data: DataSection,
    pub out_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: ScheduleKind,
    pub momentum: f64,
    /// Fraction of the dataset used for training; the rest is split 80:20
    /// into eval and cross-validation sets.
    pub train_fraction: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    Constant,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub split: u64,
    pub train: u64,
    pub mc: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DataFormat {
    Idx,
    Cifar10,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub format: DataFormat,
    pub images: PathBuf,
    /// Label file for the IDX format; ignored for CIFAR-10 batches.
    pub labels: PathBuf,
}

impl ExperimentConfig {
    /// The desk-scale setup on the bundled MNIST subset.
    #[cfg(test)]
    pub fn desk() -> Self {
        Self {
            model: LenetSpec { conv2: 32, ..LenetSpec::default() },
            hyper: HyperParams { rho: 0.15, lambda: 1e-6, mc_samples: 20 },
            placement: PlacementMode::TopologyWise,
            strategy: 1,
            train: TrainSection {
                epochs: 30,
                batch_size: 64,
                learning_rate: 0.1,
                schedule: ScheduleKind::Cosine,
                momentum: 0.9,
                train_fraction: 0.8,
            },
            seeds: Seeds { init: 1, split: 1, train: 1, mc: 7 },
            data: DataSection {
                format: DataFormat::Idx,
                images: "data/mnist-10k/images-idx3-ubyte.gz".into(),
                labels: "data/mnist-10k/labels-idx1-ubyte.gz".into(),
            },
            out_dir: "runs/desk".into(),
        }
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        let cfg: Self = toml::from_str(text).map_err(|e| Failure::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn emit(&self) -> Result<String, Failure> {
        toml::to_string(self).map_err(|e| Failure::Config(format!("cannot serialize config: {e}")))
    }

    pub fn read(path: &Path) -> Result<(Self, String), Failure> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Failure::Config(format!("cannot read config {}: {e}", path.display())))?;
        Ok((Self::parse(&text)?, text))
    }

    pub fn validate(&self) -> Result<(), Failure> {
        self.hyper.validate().map_err(|e| Failure::Config(e.to_string()))?;
        self.strategy()?;
        self.train_config().validate().map_err(|e| Failure::Config(e.to_string()))?;
        if !(self.train.train_fraction > 0.0 && self.train.train_fraction < 1.0) {
            return Err(Failure::Config(format!("train_fraction must be in (0, 1), got {}", self.train.train_fraction)));
        }
        Ok(())
    }

    pub fn strategy(&self) -> Result<Strategy, Failure> {
        Strategy::parse(&self.strategy.to_string()).map_err(|e| Failure::Config(e.to_string()))
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            epochs: t.epochs,
            batch_size: t.batch_size,
            schedule: match t.schedule {
                ScheduleKind::Constant => LrSchedule::Constant { lr: t.learning_rate },
                ScheduleKind::Cosine => LrSchedule::Cosine { base: t.learning_rate },
            },
            momentum: t.momentum,
            seed: self.seeds.train,
        }
    }
}
