//! Maximum-likelihood fine-tuning, preference tuning and the optimizer.

mod adam;
mod losses;
mod trace;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamConfig, AdamState};
pub use losses::{dpo_loss_and_grad, mle_loss_and_grad, reference_log_probs, sigmoid, softplus, DpoStats};
pub use trace::{TraceRow, TrainingTrace};

use crate::corpus::{Example, TokenId};
use crate::model::{ModelError, Parameters};
use crate::rng::{derive_seed, stream_rng};
use losses::{dpo_with_reference, mle_pairs};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("empty {0}")]
    EmptyData(&'static str),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("gradient of length {got} for {expected} parameters")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("non-finite gradient in tensor `{tensor}` at step {step}")]
    NonFiniteGradient { tensor: String, step: u64 },
    #[error("loss diverged at step {step}")]
    Diverged { step: u64, trace: Box<TrainingTrace> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// A context with a preferred (gold) and a rejected (noisy) continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTriple {
    pub context_tokens: Vec<TokenId>,
    pub preferred_tokens: Vec<TokenId>,
    pub rejected_tokens: Vec<TokenId>,
    pub alpha: f64,
    pub rng_stream_id: u64,
}

impl PreferenceTriple {
    pub fn new(
        context: Vec<TokenId>,
        preferred: Vec<TokenId>,
        rejected: Vec<TokenId>,
        alpha: f64,
        stream: u64,
    ) -> Self {
        PreferenceTriple {
            context_tokens: context,
            preferred_tokens: preferred,
            rejected_tokens: rejected,
            alpha,
            rng_stream_id: stream,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Preference runs log probe-set statistics every this many steps.
    pub log_every: u64,
    /// Number of leading triples used as the fixed logging probe set.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 16,
            epochs: 1,
            beta: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            warmup_fraction: 0.1,
            seed: 0,
            log_every: 10,
            probe_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("adam constants out of range");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]");
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1");
        }
        Ok(())
    }

    fn adam(&self, learning_rate: f64) -> AdamConfig {
        AdamConfig { learning_rate, beta1: self.adam_beta1, beta2: self.adam_beta2, eps: self.adam_eps }
    }
}

/// Linear warmup over the first `warmup_fraction` of steps, then linear
/// decay towards zero. `step` counts from 0.
pub fn learning_rate_at(config: &TrainConfig, step: u64, total_steps: u64) -> f64 {
    let warmup = (config.warmup_fraction * total_steps as f64).ceil() as u64;
    let base = config.learning_rate;
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        base * (total_steps - step) as f64 / (total_steps - warmup).max(1) as f64
    }
}

fn epoch_order(n: usize, seed: u64, label: &str, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(derive_seed(seed, label), epoch as u64));
    idx
}

fn train_mle(
    p_init: &Parameters,
    pairs: &[(&[TokenId], &[TokenId])],
    config: &TrainConfig,
    label: &str,
) -> Result<(Parameters, TrainingTrace), TrainError> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::EmptyData("training set"));
    }
    let mut params = p_init.clone();
    let mut trace = TrainingTrace::default();
    let steps_per_epoch = pairs.len().div_ceil(config.batch_size) as u64;
    let total = steps_per_epoch * config.epochs as u64;
    let mut state = AdamState::new(&params);
    let mut step = 0u64;
    for epoch in 0..config.epochs {
        let order = epoch_order(pairs.len(), config.seed, label, epoch);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| pairs[i]).collect();
            let (loss, mean_logp, grad) = mle_pairs(&params, &batch)?;
            step += 1;
            trace.push(TraceRow { step, loss, logp_preferred: mean_logp, logp_rejected: None, margin: None });
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step, trace: Box::new(trace) });
            }
            adam_step(&mut params, &grad, &mut state, &config.adam(learning_rate_at(config, step - 1, total)))?;
        }
    }
    Ok((params, trace))
}

/// Supervised fine-tuning on (context, target) pairs. The trace has one row
/// per optimizer step with the pre-update batch loss.
pub fn train_sft(
    p_init: &Parameters,
    data: &[Example],
    config: &TrainConfig,
) -> Result<(Parameters, TrainingTrace), TrainError> {
    let pairs: Vec<_> = data.iter().map(|e| (e.context_tokens.as_slice(), e.target_tokens.as_slice())).collect();
    train_mle(p_init, &pairs, config, "sft")
}

/// Unconditional language-model training on targets alone, each prefixed
/// by the single token `bos`.
pub fn pretrain_lm(
    p_init: &Parameters,
    targets: &[Vec<TokenId>],
    bos: TokenId,
    config: &TrainConfig,
) -> Result<(Parameters, TrainingTrace), TrainError> {
    let ctx = [bos];
    let pairs: Vec<_> = targets.iter().map(|t| (&ctx[..], t.as_slice())).collect();
    train_mle(p_init, &pairs, config, "pretrain")
}

/// Result of preference tuning.
#[derive(Debug, Clone)]
pub struct DpoOutcome {
    pub params: Parameters,
    pub trace: TrainingTrace,
    /// Selection score after each epoch, when a selector was supplied.
    pub epoch_scores: Vec<f64>,
    /// Zero-based epoch whose parameters were returned.
    pub selected_epoch: usize,
}

/// Preference tuning with the reference frozen at `p_theta0` and the policy
/// starting from a copy of it.
///
/// The trace is computed on a fixed probe set (the first `probe_size`
/// triples) at step 0, before any update, then every `log_every` steps and
/// at the final step.
pub fn train_dpo(
    p_theta0: &Parameters,
    triples: &[PreferenceTriple],
    config: &TrainConfig,
) -> Result<(Parameters, TrainingTrace), TrainError> {
    let out = train_dpo_selected(p_theta0, triples, config, None)?;
    Ok((out.params, out.trace))
}

/// Selector called after each epoch with the current policy; the epoch with
/// the highest score is kept (earliest on ties).
pub type EpochSelector<'a> = &'a mut dyn FnMut(usize, &Parameters) -> Result<f64, TrainError>;

pub fn train_dpo_selected(
    p_theta0: &Parameters,
    triples: &[PreferenceTriple],
    config: &TrainConfig,
    mut selector: Option<EpochSelector<'_>>,
) -> Result<DpoOutcome, TrainError> {
    config.validate()?;
    if triples.is_empty() {
        return Err(TrainError::EmptyData("preference set"));
    }
    let refs = reference_log_probs(p_theta0, triples)?;
    let n_probe = config.probe_size.clamp(1, triples.len());
    let (probe, probe_refs) = (&triples[..n_probe], &refs[..n_probe]);
    let log_row = |params: &Parameters, step: u64| -> Result<TraceRow, TrainError> {
        let (s, _) = dpo_with_reference(params, probe, probe_refs, config.beta, false)?;
        Ok(TraceRow {
            step,
            loss: s.loss,
            logp_preferred: s.logp_preferred,
            logp_rejected: Some(s.logp_rejected),
            margin: Some(s.margin),
        })
    };

    let mut policy = p_theta0.clone();
    let mut trace = TrainingTrace::default();
    trace.push(log_row(&policy, 0)?);
    let steps_per_epoch = triples.len().div_ceil(config.batch_size) as u64;
    let total = steps_per_epoch * config.epochs as u64;
    let mut state = AdamState::new(&policy);
    let mut step = 0u64;
    let mut best: Option<(f64, usize, Parameters)> = None;
    let mut epoch_scores = Vec::new();
    for epoch in 0..config.epochs {
        let order = epoch_order(triples.len(), config.seed, "dpo", epoch);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| triples[i].clone()).collect();
            let batch_refs: Vec<_> = chunk.iter().map(|&i| refs[i]).collect();
            let (stats, grad) = dpo_with_reference(&policy, &batch, &batch_refs, config.beta, true)?;
            if !stats.loss.is_finite() {
                return Err(TrainError::Diverged { step: step + 1, trace: Box::new(trace) });
            }
            adam_step(&mut policy, &grad, &mut state, &config.adam(learning_rate_at(config, step, total)))?;
            step += 1;
            if step % config.log_every == 0 || step == total {
                let row = log_row(&policy, step)?;
                let finite = row.loss.is_finite();
                trace.push(row);
                if !finite {
                    return Err(TrainError::Diverged { step, trace: Box::new(trace) });
                }
            }
        }
        if let Some(sel) = selector.as_mut() {
            let score = sel(epoch, &policy)?;
            epoch_scores.push(score);
            if best.as_ref().map_or(true, |(b, _, _)| score > *b) {
                best = Some((score, epoch, policy.clone()));
            }
        }
    }
    let (params, selected_epoch) = match best {
        Some((_, e, p)) => (p, e),
        None => (policy, config.epochs.saturating_sub(1)),
    };
    Ok(DpoOutcome { params, trace, epoch_scores, selected_epoch })
}
