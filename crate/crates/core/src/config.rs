//! One JSON document holding every stage's knobs, one section per module.
//! Unknown keys are rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bench::synth::SynthConfig;
use crate::catalog::PreprocessConfig;
use crate::cognition::JudgeConfig;
use crate::model::train::TrainConfig;
use crate::model::ModelConfig;
use crate::profile::{HourWindow, ProfileConfig};
use crate::serve::pipeline::Workers;
use crate::serve::DEFAULT_GAMMA;
use crate::sid::FeatureConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IngestFormat {
    #[default]
    FoursquareTsv,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IngestConfig {
    /// Check-in file; when unset the synthetic world is used.
    pub path: Option<PathBuf>,
    pub format: IngestFormat,
    /// POI catalog JSONL, required for the `jsonl` format.
    pub catalog: Option<PathBuf>,
    pub region: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SidConfig {
    pub levels: usize,
    pub k: usize,
    pub features: FeatureConfig,
}

impl Default for SidConfig {
    fn default() -> Self {
        SidConfig { levels: 3, k: 256, features: FeatureConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    /// History clauses in prompts and at evaluation.
    pub max_history: usize,
    /// Check-ins per pretraining sequence record.
    pub sequence_window: usize,
    pub sequence_stride: usize,
    pub mask_ratio: f64,
    /// Alignment : sequence records per pretraining cycle.
    pub mix: (usize, usize),
    pub max_vocab: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { max_history: 50, sequence_window: 50, sequence_stride: 25, mask_ratio: 0.15, mix: (1, 3), max_vocab: crate::corpus::DEFAULT_MAX_VOCAB }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub train: TrainConfig,
    pub steps: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig { train: TrainConfig::default(), steps: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftConfig {
    pub train: TrainConfig,
    pub epochs: usize,
}

impl Default for SftConfig {
    fn default() -> Self {
        SftConfig { train: TrainConfig::default(), epochs: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpoStageConfig {
    pub beta: f64,
    pub train: TrainConfig,
    pub epochs: usize,
    /// Stop once the epoch margin gains less than this.
    pub plateau: f64,
    /// Frequent history POIs offered as candidates.
    pub history_candidates: usize,
    /// POIs nearest to the truth with the same top category, offered as candidates.
    pub nearby_candidates: usize,
}

impl Default for DpoStageConfig {
    fn default() -> Self {
        DpoStageConfig {
            beta: 0.1,
            train: TrainConfig { lr: 1e-4, warmup_steps: 10, ..TrainConfig::default() },
            epochs: 3,
            plateau: 1e-3,
            history_candidates: 6,
            nearby_candidates: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServeConfig {
    pub gamma: usize,
    pub workers: Workers,
    pub queue_bound: usize,
    pub draft_epochs: usize,
    pub draft_train: TrainConfig,
    pub requests: usize,
}

impl Default for ServeConfig {
    fn default() -> Self {
        ServeConfig {
            gamma: DEFAULT_GAMMA,
            workers: Workers { prefill: 2, decode: 1 },
            queue_bound: 4,
            draft_epochs: 3,
            draft_train: TrainConfig { lr: 1e-3, ..TrainConfig::default() },
            requests: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub ingest: IngestConfig,
    pub synth: SynthConfig,
    pub preprocess: PreprocessConfig,
    pub profile: ProfileConfig,
    pub sid: SidConfig,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub sft: SftConfig,
    pub dpo: DpoStageConfig,
    pub serve: ServeConfig,
    pub judge: JudgeConfig,
}

impl RunConfig {
    /// Small seed-pinned configuration for the 20-user planted world; runs
    /// the full chain in minutes on one core.
    pub fn pinned_demo() -> Self {
        let fast = TrainConfig { lr: 3e-3, warmup_steps: 30, batch_size: 8, ..TrainConfig::default() };
        RunConfig {
            seed: 42,
            synth: SynthConfig::default(),
            // The planted commute is 08:00 at work and 18:00 at home.
            profile: ProfileConfig {
                home_window: HourWindow { start: 18, end: 8 },
                work_window: HourWindow { start: 8, end: 18 },
                ..ProfileConfig::default()
            },
            sid: SidConfig { levels: 3, k: 16, ..SidConfig::default() },
            corpus: CorpusConfig { max_history: 6, sequence_window: 12, sequence_stride: 6, ..CorpusConfig::default() },
            model: ModelConfig { d_model: 64, n_heads: 4, n_layers: 2, context_len: 256, ..ModelConfig::default() },
            pretrain: PretrainConfig { train: fast.clone(), steps: 300 },
            sft: SftConfig { train: fast, epochs: 6 },
            dpo: DpoStageConfig { epochs: 2, ..DpoStageConfig::default() },
            ..RunConfig::default()
        }
    }

    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let cfg: RunConfig = serde_json::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let s = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Stage seeds derive from `seed`; the synthetic world keeps its own.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: &str| Err(ConfigError::Invalid(m.into()));
        if self.ingest.path.is_none() {
            self.synth.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        }
        if self.ingest.format == IngestFormat::Jsonl && self.ingest.path.is_some() && self.ingest.catalog.is_none() {
            return bad("ingest.catalog is required for the jsonl format");
        }
        if self.sid.levels == 0 || self.sid.k < 2 {
            return bad("sid.levels must be positive and sid.k at least 2");
        }
        if !(0.0..1.0).contains(&self.corpus.mask_ratio) {
            return bad("corpus.mask_ratio must be in [0, 1)");
        }
        if self.corpus.sequence_window == 0 || self.corpus.sequence_stride == 0 || self.corpus.max_history == 0 {
            return bad("corpus windows must be positive");
        }
        if !(self.dpo.beta > 0.0) {
            return bad("dpo.beta must be positive");
        }
        if self.serve.gamma == 0 {
            return bad("serve.gamma must be positive");
        }
        let mut m = self.model.clone();
        m.vocab_size = m.vocab_size.max(1);
        m.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(())
    }
}
