//! A small pre-norm causal transformer in 64-bit floats.
//!
//! One [`Parameters`] type serves all three roles of the method: the
//! context-free pretrained model, the supervised reference model, and the
//! preference-tuned policy. Conditioning is plain concatenation: a
//! conditional prefix is `context ++ target[..t]` (the context ends with a
//! separator token), an unconditional prefix is `[bos] ++ target[..t]`.

mod checkpoint;
mod forward;
pub(crate) mod ops;
mod session;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, Checkpoint, Role};
pub use forward::{forward_tape, sequence_log_prob_and_grad, Tape};
pub use session::Session;

use crate::corpus::TokenId;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of {len} tokens exceeds max_seq_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("empty prefix")]
    EmptyPrefix,
    #[error("token {token} outside vocabulary of size {vocab}")]
    OutOfVocab { token: TokenId, vocab: usize },
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// 2 layers, 4 heads, width 64, feed-forward 256.
    pub fn reference(vocab_size: usize, max_seq_len: usize) -> Self {
        ModelConfig { vocab_size, d_model: 64, n_layers: 2, n_heads: 4, d_ff: 256, max_seq_len, seed: 0 }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let c = self;
        if [c.vocab_size, c.d_model, c.n_layers, c.n_heads, c.d_ff, c.max_seq_len].contains(&0) {
            return Err(ModelError::InvalidConfig("all sizes must be positive".into()));
        }
        if c.d_model % c.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "d_model {} not divisible by n_heads {}",
                c.d_model, c.n_heads
            )));
        }
        Ok(())
    }

    /// Same architecture (everything but the seed).
    pub fn same_shape(&self, other: &ModelConfig) -> bool {
        ModelConfig { seed: 0, ..self.clone() } == ModelConfig { seed: 0, ..other.clone() }
    }
}

/// Where a named tensor lives in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerOffsets {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub b_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_fc: Range<usize>,
    pub b_fc: Range<usize>,
    pub w_proj: Range<usize>,
    pub b_proj: Range<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Offsets {
    pub wte: Range<usize>,
    pub wpe: Range<usize>,
    pub layers: Vec<LayerOffsets>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub w_out: Range<usize>,
}

/// Ordered tensor table for a config.
pub fn layout(config: &ModelConfig) -> Vec<TensorSpec> {
    let (v, d, f, t) = (config.vocab_size, config.d_model, config.d_ff, config.max_seq_len);
    let mut specs = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let s = TensorSpec { name, shape, offset };
        offset += s.len();
        specs.push(s);
    };
    push("wte".into(), vec![v, d]);
    push("wpe".into(), vec![t, d]);
    for l in 0..config.n_layers {
        push(format!("h{l}.ln1.g"), vec![d]);
        push(format!("h{l}.ln1.b"), vec![d]);
        push(format!("h{l}.attn.w_qkv"), vec![d, 3 * d]);
        push(format!("h{l}.attn.b_qkv"), vec![3 * d]);
        push(format!("h{l}.attn.w_o"), vec![d, d]);
        push(format!("h{l}.attn.b_o"), vec![d]);
        push(format!("h{l}.ln2.g"), vec![d]);
        push(format!("h{l}.ln2.b"), vec![d]);
        push(format!("h{l}.mlp.w_fc"), vec![d, f]);
        push(format!("h{l}.mlp.b_fc"), vec![f]);
        push(format!("h{l}.mlp.w_proj"), vec![f, d]);
        push(format!("h{l}.mlp.b_proj"), vec![d]);
    }
    push("lnf.g".into(), vec![d]);
    push("lnf.b".into(), vec![d]);
    push("w_out".into(), vec![d, v]);
    specs
}

fn offsets(specs: &[TensorSpec], n_layers: usize) -> Offsets {
    let mut it = specs.iter().map(TensorSpec::range);
    let mut next = || it.next().expect("layout entry");
    let wte = next();
    let wpe = next();
    let layers = (0..n_layers)
        .map(|_| LayerOffsets {
            ln1_g: next(),
            ln1_b: next(),
            w_qkv: next(),
            b_qkv: next(),
            w_o: next(),
            b_o: next(),
            ln2_g: next(),
            ln2_b: next(),
            w_fc: next(),
            b_fc: next(),
            w_proj: next(),
            b_proj: next(),
        })
        .collect();
    Offsets { wte, wpe, layers, lnf_g: next(), lnf_b: next(), w_out: next() }
}

/// Model weights as one flat vector with a named layout.
///
/// Layer-norm gains are stored as offsets from one, so a freshly
/// initialized model has every stored value well inside `(-1, 1)`.
#[derive(Debug, Clone)]
pub struct Parameters {
    config: ModelConfig,
    specs: Vec<TensorSpec>,
    pub(crate) offsets: Offsets,
    data: Vec<f64>,
}

impl PartialEq for Parameters {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl Parameters {
    /// All-zero parameters (uniform next-token distribution).
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = layout(config);
        let total = specs.last().map(|s| s.offset + s.len()).unwrap_or(0);
        let offsets = offsets(&specs, config.n_layers);
        Ok(Parameters { config: config.clone(), specs, offsets, data: vec![0.0; total] })
    }

    pub fn from_vec(config: &ModelConfig, data: Vec<f64>) -> Result<Self, ModelError> {
        let mut p = Self::zeros(config)?;
        if data.len() != p.data.len() {
            return Err(ModelError::ConfigMismatch(format!(
                "{} values for a model with {} parameters",
                data.len(),
                p.data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn specs(&self) -> &[TensorSpec] {
        &self.specs
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.specs.iter().find(|s| s.name == name).map(|s| &self.data[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let r = self.specs.iter().find(|s| s.name == name)?.range();
        Some(&mut self.data[r])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// A zero vector shaped like these parameters.
    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.data.len()]
    }

    pub(crate) fn check_tokens(&self, tokens: &[TokenId]) -> Result<(), ModelError> {
        if tokens.len() > self.config.max_seq_len {
            return Err(ModelError::TooLong { len: tokens.len(), max: self.config.max_seq_len });
        }
        let vocab = self.config.vocab_size;
        match tokens.iter().find(|&&t| t as usize >= vocab) {
            Some(&token) => Err(ModelError::OutOfVocab { token, vocab }),
            None => Ok(()),
        }
    }
}

/// Scaled normal initialization, `N(0, 0.02^2)` for every matrix and
/// embedding; biases and gain offsets start at zero.
pub fn init_params(config: &ModelConfig) -> Result<Parameters, ModelError> {
    let mut p = Parameters::zeros(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let normal = Normal::new(0.0, 0.02).expect("valid normal");
    for spec in p.specs.clone() {
        if spec.shape.len() == 2 {
            for v in &mut p.data[spec.range()] {
                *v = normal.sample(&mut rng);
            }
        }
    }
    Ok(p)
}

/// Normalized next-token probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDistribution {
    pub probs: Vec<f64>,
}

impl TokenDistribution {
    /// Softmax of `logits`.
    pub fn from_logits(mut logits: Vec<f64>) -> Self {
        ops::softmax_in_place(&mut logits);
        TokenDistribution { probs: logits }
    }

    /// Natural-log probabilities, `ln p_i` (`-inf` where `p_i = 0`).
    pub fn log_probs(&self) -> Vec<f64> {
        self.probs.iter().map(|p| p.ln()).collect()
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        -self.probs.iter().filter(|&&p| p > 0.0).map(|&p| p * p.ln()).sum::<f64>()
    }

    pub fn argmax(&self) -> TokenId {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best as TokenId
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        self.probs.iter().all(|&p| p >= 0.0 && p.is_finite()) && (self.probs.iter().sum::<f64>() - 1.0).abs() <= tol
    }
}

/// Distribution of the token following `prefix`.
pub fn next_token_distribution(params: &Parameters, prefix: &[TokenId]) -> Result<TokenDistribution, ModelError> {
    if prefix.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    params.check_tokens(prefix)?;
    let mut s = Session::new(params);
    let mut logits = Vec::new();
    for &t in prefix {
        logits = s.push(t)?;
    }
    Ok(TokenDistribution::from_logits(logits))
}

/// `ln p(target | context)` in nats: the sum over target positions of the
/// log-probability of each realized token given the context and the
/// preceding target tokens. An empty target scores 0.
pub fn sequence_log_prob(params: &Parameters, context: &[TokenId], target: &[TokenId]) -> Result<f64, ModelError> {
    if target.is_empty() {
        return Ok(0.0);
    }
    if context.is_empty() {
        return Err(ModelError::EmptyPrefix);
    }
    let tape = forward_tape(params, context, target)?;
    Ok(tape.log_prob())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(seed: u64) -> ModelConfig {
        ModelConfig { vocab_size: 11, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 12, max_seq_len: 12, seed }
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_params(&tiny(3)).unwrap();
        let b = init_params(&tiny(3)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_params(&tiny(4)).unwrap());
    }

    #[test]
    fn parameter_count_matches_shapes() {
        let cfg =
            ModelConfig { vocab_size: 64, d_model: 32, n_layers: 2, n_heads: 4, d_ff: 128, max_seq_len: 16, seed: 0 };
        let p = init_params(&cfg).unwrap();
        let (v, d, f, t) = (64, 32, 128, 16);
        let per_layer = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * f + f) + (f * d + d);
        assert_eq!(p.len(), v * d + t * d + 2 * per_layer + 2 * d + d * v);
    }

    #[test]
    fn init_values_small_and_finite() {
        let p = init_params(&ModelConfig::reference(200, 64)).unwrap();
        assert!(p.as_slice().iter().all(|v| v.is_finite() && v.abs() < 1.0));
        let w = p.tensor("w_out").unwrap();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 1e-3);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(init_params(&ModelConfig { n_heads: 3, ..tiny(0) }).is_err());
        assert!(init_params(&ModelConfig { vocab_size: 0, ..tiny(0) }).is_err());
    }

    #[test]
    fn zero_output_projection_is_uniform() {
        let mut p = init_params(&tiny(1)).unwrap();
        p.tensor_mut("w_out").unwrap().fill(0.0);
        let d = next_token_distribution(&p, &[1, 4, 5]).unwrap();
        for &q in &d.probs {
            assert!((q - 1.0 / 11.0).abs() < 1e-15);
        }
    }

    #[test]
    fn distribution_errors() {
        let p = init_params(&tiny(1)).unwrap();
        assert!(matches!(next_token_distribution(&p, &[]), Err(ModelError::EmptyPrefix)));
        assert!(matches!(next_token_distribution(&p, &[1; 13]), Err(ModelError::TooLong { .. })));
        assert!(matches!(next_token_distribution(&p, &[1, 11]), Err(ModelError::OutOfVocab { .. })));
    }

    #[test]
    fn log_prob_empty_and_uniform() {
        let mut p = init_params(&tiny(2)).unwrap();
        assert_eq!(sequence_log_prob(&p, &[1, 2], &[]).unwrap(), 0.0);
        p.tensor_mut("w_out").unwrap().fill(0.0);
        let lp = sequence_log_prob(&p, &[1, 2], &[3, 4, 5, 2]).unwrap();
        assert!((lp + 4.0 * (11f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn log_prob_matches_chain_rule() {
        let p = init_params(&tiny(5)).unwrap();
        let ctx = [1u32, 7, 3];
        let tgt = [4u32, 9, 2];
        // Brute force: product of next-token probabilities over growing prefixes.
        let mut prefix = ctx.to_vec();
        let mut brute = 0.0;
        for &y in &tgt {
            brute += next_token_distribution(&p, &prefix).unwrap().probs[y as usize].ln();
            prefix.push(y);
        }
        let lp = sequence_log_prob(&p, &ctx, &tgt).unwrap();
        assert!((lp - brute).abs() < 1e-12, "{lp} vs {brute}");
        assert!(lp <= 0.0);
    }

    #[test]
    fn causal_prefix_invariance() {
        let p = init_params(&tiny(6)).unwrap();
        let seq = [1u32, 3, 5, 7, 9, 2, 4];
        for t in 1..seq.len() {
            let short = next_token_distribution(&p, &seq[..t]).unwrap();
            // Full-sequence forward, reading the distribution at position t-1.
            let tape = forward_tape(&p, &seq[..1], &seq[1..]).unwrap();
            let full = tape.distribution_at(t - 1);
            for (a, b) in short.probs.iter().zip(&full) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn distribution_helpers() {
        let d = TokenDistribution { probs: vec![0.5, 0.5, 0.0] };
        assert!((d.entropy() - 2f64.ln()).abs() < 1e-15);
        assert_eq!(d.argmax(), 0);
        assert!(d.is_valid(1e-12));
    }
}
