//! Pipeline configuration, read from a TOML file.
//!
//! ```toml
//! [pipeline]
//! seed = 0
//! workspace = "workspace"
//! train_size = 300
//! test_size = 200
//! ranking_policy = "score_ascending"
//! exemplars_per_task = 1
//!
//! [pipeline.sizes.MAST-28class]
//! train = 600
//! test = 300
//!
//! [sft]
//! learning_rate = 0.1
//!
//! [merge]
//! generations = 10
//!
//! [difficulty]
//! w1 = 1.0
//! ```
//!
//! Every key is optional. The seeds of `[sft]` and `[merge]` are derived from
//! `pipeline.seed` and any value given there is ignored.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use memmcl_core::curriculum::{DifficultyWeights, RankingPolicy};
use memmcl_core::evolution::EvolutionConfig;
use memmcl_core::tasks::SplitSizes;
use memmcl_core::toymodel::TrainConfig;
use memmcl_core::TaskMeta;
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::CliError;

/// Expert learning rate used by the pipeline.
pub const DESK_LEARNING_RATE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SizeOverride {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub seed: u64,
    pub workspace: PathBuf,
    pub train_size: usize,
    pub test_size: usize,
    pub sizes: BTreeMap<String, SizeOverride>,
    pub ranking_policy: RankingPolicy,
    pub exemplars_per_task: usize,
    /// Size of the training-data slice that stands in for an empty weak set.
    pub weak_fallback_size: usize,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            seed: 0,
            workspace: PathBuf::from("workspace"),
            train_size: 300,
            test_size: 200,
            sizes: BTreeMap::new(),
            ranking_policy: RankingPolicy::ScoreAscending,
            exemplars_per_task: 1,
            weak_fallback_size: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub pipeline: PipelineSection,
    #[serde(deserialize_with = "sft_with_desk_rate")]
    pub sft: TrainConfig,
    pub merge: EvolutionConfig,
    pub difficulty: DifficultyWeights,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            pipeline: PipelineSection::default(),
            sft: TrainConfig {
                learning_rate: DESK_LEARNING_RATE,
                ..TrainConfig::default()
            },
            merge: EvolutionConfig::default(),
            difficulty: DifficultyWeights::default(),
        }
    }
}

/// Reads `[sft]` with [`DESK_LEARNING_RATE`] as the learning-rate default.
fn sft_with_desk_rate<'de, D: Deserializer<'de>>(de: D) -> Result<TrainConfig, D::Error> {
    let mut table = toml::Table::deserialize(de)?;
    table
        .entry("learning_rate")
        .or_insert(toml::Value::Float(DESK_LEARNING_RATE));
    toml::Value::Table(table).try_into().map_err(serde::de::Error::custom)
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let p = &self.pipeline;
        if p.exemplars_per_task == 0 {
            return Err(CliError::Config("exemplars_per_task must be at least 1".into()));
        }
        if p.weak_fallback_size == 0 {
            return Err(CliError::Config("weak_fallback_size must be at least 1".into()));
        }
        if p.train_size == 0 || p.test_size == 0 {
            return Err(CliError::Config("train_size and test_size must be positive".into()));
        }
        self.sft.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.merge.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn split_sizes(&self, task: &TaskMeta) -> SplitSizes {
        match self.pipeline.sizes.get(&task.task_id) {
            Some(o) => SplitSizes {
                train: o.train,
                test: o.test,
            },
            None => SplitSizes {
                train: self.pipeline.train_size,
                test: self.pipeline.test_size,
            },
        }
    }
}
