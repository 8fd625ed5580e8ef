use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::corpus::{CorpusConfig, Lexicon};
use crate::decoding::{BaselineConfig, DecodeConfig, NoiseConfig};
use crate::model::ModelConfig;
use crate::rng::derive_seed;
use crate::training::TrainConfig;

/// Architecture without the vocabulary size, which comes from the lexicon.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let r = ModelConfig::reference(0, 96);
        ModelShape {
            d_model: r.d_model,
            n_layers: r.n_layers,
            n_heads: r.n_heads,
            d_ff: r.d_ff,
            max_seq_len: r.max_seq_len,
        }
    }
}

impl ModelShape {
    pub fn config(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            max_seq_len: self.max_seq_len,
            seed,
        }
    }
}

/// Everything a pipeline run depends on.
///
/// Seed fields inside the nested configs are ignored: every stage seed is
/// derived from `seed` and the stage name (see [`PipelineConfig::stage_seed`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub heldout_count: usize,
    pub split_ratio: f64,
    pub model: ModelShape,
    pub pretrain: TrainConfig,
    pub sft: TrainConfig,
    pub dpo: TrainConfig,
    pub noise: NoiseConfig,
    /// Sampling settings for negatives.
    pub negative_decode: DecodeConfig,
    /// Decoding settings for evaluation and checkpoint selection.
    pub eval_decode: DecodeConfig,
    pub baseline: BaselineConfig,
    /// Number of leading D1 examples used to pick the preference-tuning epoch.
    pub validation_size: usize,
    /// Log-probability drop (nats) that marks a degenerate preference run.
    pub regime_epsilon: f64,
    pub alpha_grid: Vec<f64>,
    pub beta_grid: Vec<f64>,
    pub split_grid: Vec<f64>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 1,
            out_dir: PathBuf::from("runs/reference"),
            corpus: CorpusConfig::reference(),
            heldout_count: 500,
            split_ratio: 0.5,
            model: ModelShape::default(),
            pretrain: TrainConfig { learning_rate: 2e-3, batch_size: 16, epochs: 3, ..Default::default() },
            sft: TrainConfig { learning_rate: 5e-3, batch_size: 8, epochs: 3, adam_beta2: 0.98, ..Default::default() },
            dpo: TrainConfig { learning_rate: 1e-4, batch_size: 16, epochs: 1, beta: 0.1, ..Default::default() },
            noise: NoiseConfig { alpha: 0.5 },
            negative_decode: DecodeConfig { max_new_tokens: 40, temperature: 1.0, greedy: false, ..Default::default() },
            eval_decode: DecodeConfig { max_new_tokens: 40, temperature: 1.0, greedy: true, ..Default::default() },
            baseline: BaselineConfig::default(),
            validation_size: 200,
            regime_epsilon: 0.2,
            alpha_grid: vec![0.4, 0.5, 0.6],
            beta_grid: vec![0.05, 0.1, 1.0, 5.0],
            split_grid: vec![0.25, 0.5, 0.75],
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self, HarnessError> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, HarnessError> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }

    /// `splitmix64(seed ^ fnv1a(stage))`.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn lexicon(&self) -> Result<Lexicon, HarnessError> {
        self.corpus.lexicon().map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        self.corpus.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.lexicon()?;
        for (name, t) in [("pretrain", &self.pretrain), ("sft", &self.sft), ("dpo", &self.dpo)] {
            t.validate().map_err(|e| HarnessError::Config(format!("{name}: {e}")))?;
        }
        self.noise.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.baseline.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.negative_decode.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.eval_decode.validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        self.model
            .config(self.lexicon()?.vocab_size(), 0)
            .validate()
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio {} outside (0, 1)", self.split_ratio));
        }
        if self.heldout_count == 0 || self.heldout_count >= self.corpus.num_records {
            return bad("heldout_count must be positive and below num_records".into());
        }
        if self.alpha_grid.is_empty() || self.alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return bad("alpha_grid must be non-empty and inside [0, 1]".into());
        }
        if self.beta_grid.is_empty() || self.beta_grid.iter().any(|b| !(*b > 0.0)) {
            return bad("beta_grid must be non-empty and positive".into());
        }
        if self.split_grid.is_empty() || self.split_grid.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
            return bad("split_grid must be non-empty and inside (0, 1)".into());
        }
        if !(self.regime_epsilon >= 0.0) {
            return bad("regime_epsilon must be non-negative".into());
        }
        Ok(())
    }
}
