//! Run configuration and its content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::engine::TrainConfig;
use crate::model::ModelConfig;
use crate::savpt::{Placement, PromptInit};
use crate::scenegen::DatasetConfig;
use crate::scheduler::{StageBudgets, Strategy};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config {path}: {msg}")]
    Read { path: PathBuf, msg: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Which network the final report evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EvalNet {
    Student,
    #[default]
    Teacher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub taus: Vec<f64>,
    pub placements: Vec<Placement>,
    pub inits: Vec<PromptInit>,
    /// `(m1_iters, m2_iters)` pairs; `chain_end` stays as configured.
    pub cod_iters: Vec<(u64, u64)>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            taus: vec![0.05, 0.38],
            placements: vec![Placement::CornerCenter, Placement::Padding, Placement::Random],
            inits: vec![
                PromptInit::Zeros,
                PromptInit::Ones,
                PromptInit::Uniform01,
                PromptInit::Normal01,
            ],
            cod_iters: vec![(30, 100), (60, 200), (120, 400)],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Training seed (init, sampling, placement).
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub strategy: Strategy,
    pub budgets: StageBudgets,
    pub eval_net: EvalNet,
    pub checkpoint_every: u64,
    pub range_seeds: Vec<u64>,
    pub range_strategies: Vec<Strategy>,
    pub ablation: AblationConfig,
    /// Where `gen-data` writes and `train` reads. Not part of the hash.
    pub data_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dataset = DatasetConfig::default();
        RunConfig {
            seed: 1,
            model: ModelConfig::for_image(dataset.size),
            dataset,
            train: TrainConfig::default(),
            strategy: Strategy::CodTra,
            budgets: StageBudgets::desk(),
            eval_net: EvalNet::Teacher,
            checkpoint_every: 500,
            range_seeds: vec![1, 2, 38],
            range_strategies: vec![Strategy::Tradition, Strategy::CodTra],
            ablation: AblationConfig::default(),
            data_dir: PathBuf::from("data"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let err = |msg: String| ConfigError::Read {
            path: path.to_path_buf(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let cfg: RunConfig = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.model.image_size != self.dataset.size {
            return bad(format!(
                "model.image_size {} differs from dataset.size {}",
                self.model.image_size, self.dataset.size
            ));
        }
        if self.budgets.total_iters != self.train.iters {
            return bad(format!(
                "budgets.total_iters {} differs from train.iters {}",
                self.budgets.total_iters, self.train.iters
            ));
        }
        self.budgets
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.train
            .severity
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.train.source_batch == 0 || self.train.target_batch == 0 {
            return bad("batch sizes must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.train.ema_alpha) {
            return bad(format!("ema_alpha {} outside [0,1]", self.train.ema_alpha));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON with paths cleared.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.data_dir = PathBuf::new();
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Same config with a different training length; budgets scale along.
    pub fn with_iters(&self, iters: u64) -> RunConfig {
        let mut c = self.clone();
        let f = iters as f64 / self.train.iters as f64;
        c.budgets = self.budgets.scaled(f);
        c.budgets.total_iters = iters;
        c.budgets.chain_end = c.budgets.chain_end.min(iters);
        c.train.iters = iters;
        c
    }
}
