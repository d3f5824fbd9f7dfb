//! Run configuration: one JSON file covering data generation, model shape,
//! the training schedule, and evaluation knobs. CLI flags override fields.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::datagen::GenSpec;
use crate::error::{Result, SptError};
use crate::model::ModelConfig;
use crate::trainer::Optimizer;

fn default_format_version() -> u32 {
    1
}

/// One training stage's schedule.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct StageConfig {
    pub epochs: usize,
    pub lr: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub pretrain: StageConfig,
    pub phase1: StageConfig,
    pub phase2: StageConfig,
    pub phase3: StageConfig,
    pub batch_size: usize,
    /// Training-set cap on the schema-free fraction (downsampling).
    pub schema_free_cap: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain: StageConfig {
                epochs: 30,
                lr: 1e-3,
                optimizer: Optimizer::Adam,
            },
            phase1: StageConfig {
                epochs: 3,
                lr: 5e-4,
                optimizer: Optimizer::Adam,
            },
            phase2: StageConfig {
                epochs: 3,
                lr: 5e-4,
                optimizer: Optimizer::Adam,
            },
            phase3: StageConfig {
                epochs: 2,
                lr: 5e-5,
                optimizer: Optimizer::Adam,
            },
            batch_size: 32,
            schema_free_cap: 0.30,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EvalConfig {
    pub k: usize,
    pub copy_constraint: bool,
    pub soft_match_threshold: f64,
    /// Query count for the inference-cost benchmark.
    pub bench_queries: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 5,
            copy_constraint: true,
            soft_match_threshold: 0.5,
            bench_queries: 100,
        }
    }
}

/// Artifact locations, all relative to the run directory unless absolute.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PathsConfig {
    pub run_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

impl PathsConfig {
    pub fn pool(&self) -> PathBuf {
        self.run_dir.join("pool.json")
    }
    pub fn train(&self) -> PathBuf {
        self.run_dir.join("train.jsonl")
    }
    pub fn test(&self) -> PathBuf {
        self.run_dir.join("test.jsonl")
    }
    pub fn checkpoint(&self, stage: crate::checkpoint::Stage) -> PathBuf {
        self.run_dir.join(format!("{}.spt", stage.label()))
    }
    pub fn metrics(&self) -> PathBuf {
        self.run_dir.join("metrics.jsonl")
    }
    pub fn report(&self) -> PathBuf {
        self.run_dir.join("report.json")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Config {
    #[serde(default = "default_format_version")]
    pub format_version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub data: GenSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: PathsConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            format_version: 1,
            seed: 7,
            model: ModelConfig::default(),
            data: GenSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: Config = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != 1 {
            return Err(SptError::Spec(format!(
                "unsupported config format_version {}",
                self.format_version
            )));
        }
        for (name, stage) in [
            ("pretrain", &self.train.pretrain),
            ("phase1", &self.train.phase1),
            ("phase2", &self.train.phase2),
            ("phase3", &self.train.phase3),
        ] {
            if stage.lr <= 0.0 {
                return Err(SptError::Spec(format!("{name} lr must be positive")));
            }
            if let Optimizer::Sgd { momentum } = stage.optimizer {
                if !(0.0..1.0).contains(&momentum) {
                    return Err(SptError::Spec(format!("{name} momentum must be in [0,1)")));
                }
            }
        }
        if self.eval.k == 0 {
            return Err(SptError::Spec("eval.k must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.eval.soft_match_threshold) {
            return Err(SptError::Spec("soft_match_threshold must be in [0,1]".into()));
        }
        if self.train.batch_size == 0 {
            return Err(SptError::Spec("batch_size must be positive".into()));
        }
        Ok(())
    }
}
