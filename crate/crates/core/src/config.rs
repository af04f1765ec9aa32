//! Experiment configuration: every knob of a run in one TOML-serializable
//! value, with named presets.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::body::Skeleton;
use crate::diffusion::{SamplerConfig, ScheduleConfig};
use crate::error::{io_err, Error, Result};
use crate::eval::EvalConfig;
use crate::exec::Execution;
use crate::model::ModelConfig;
use crate::scene::DataConfig;
use crate::train::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub execution: Execution,
    /// Where `gen-data` writes and training reads the dataset.
    pub dataset_dir: PathBuf,
    /// Run directory holding checkpoints, logs and reports.
    pub output_dir: PathBuf,
    pub skeleton: Skeleton,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            execution: Execution::default(),
            dataset_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("runs/default"),
            skeleton: Skeleton::default(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

pub const PRESETS: [&str; 3] = ["default", "desk", "overfit"];

impl ExperimentConfig {
    /// Small networks sized for a single workstation core.
    pub fn desk() -> Self {
        Self {
            output_dir: PathBuf::from("runs/desk"),
            model: ModelConfig::desk(),
            ..Self::default()
        }
    }

    /// Ten training samples memorized over many epochs.
    pub fn overfit() -> Self {
        let mut c = Self::desk();
        c.output_dir = PathBuf::from("runs/overfit");
        c.train.train_limit = Some(10);
        c.train.val_limit = 10;
        c.train.validate_on_train = true;
        c.train.batch_size = 10;
        c.train.epochs = 2500;
        c.train.head_epochs = 500;
        c.train.cond_dropout = 0.0;
        // memorization is judged on L_simple, so it carries full weight
        c.train.weights.simple = 1.0;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::default()),
            "desk" => Ok(Self::desk()),
            "overfit" => Ok(Self::overfit()),
            _ => Err(Error::Config(format!(
                "unknown preset `{name}` (expected one of {})",
                PRESETS.join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.skeleton.validate()?;
        self.data.validate()?;
        self.model.validate()?;
        if self.schedule.steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        self.train.validate()?;
        self.sampler.validate()?;
        self.eval.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(io_err(path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_round_trip_through_toml() {
        for name in PRESETS {
            let c = ExperimentConfig::preset(name).unwrap();
            c.validate().unwrap();
            let back = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
            assert_eq!(back, c, "{name}");
        }
        assert!(ExperimentConfig::preset("huge").is_err());
    }

    #[test]
    fn partial_files_fill_from_defaults() {
        let c = ExperimentConfig::from_toml("seed = 7\n[train]\nepochs = 2\n[model]\nhidden = 32\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.model.hidden, 32);
        assert!(ExperimentConfig::from_toml("sed = 7\n").is_err());
        assert!(ExperimentConfig::from_toml("[train]\ncond_dropout = 1.5\n").is_err());
    }
}
