use rayon::prelude::*;

use super::{PreferenceTriple, TrainError};
use crate::corpus::{Example, TokenId};
use crate::model::{forward_tape, sequence_log_prob, sequence_log_prob_and_grad, Parameters};

/// `ln(1 + e^z)` without overflow for large `|z|`.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Evaluates `f` on every item in parallel, each with its own gradient
/// buffer, then sums the buffers in item order so the result does not depend
/// on scheduling.
pub(crate) fn map_reduce_grad<T, R, F>(n_params: usize, items: &[T], f: F) -> Result<(Vec<R>, Vec<f64>), TrainError>
where
    T: Sync,
    R: Send,
    F: Fn(&T, &mut [f64]) -> Result<R, TrainError> + Sync,
{
    let parts: Vec<(R, Vec<f64>)> = items
        .par_iter()
        .map(|item| {
            let mut g = vec![0.0; n_params];
            f(item, &mut g).map(|r| (r, g))
        })
        .collect::<Result<_, _>>()?;
    let mut grad = vec![0.0; n_params];
    let mut out = Vec::with_capacity(parts.len());
    for (r, g) in parts {
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
        out.push(r);
    }
    Ok((out, grad))
}

/// Token-level mean negative log-likelihood of the targets given their
/// contexts, and its gradient. Context tokens carry no loss.
pub fn mle_loss_and_grad(params: &Parameters, batch: &[Example]) -> Result<(f64, Vec<f64>), TrainError> {
    let pairs: Vec<(&[TokenId], &[TokenId])> =
        batch.iter().map(|e| (e.context_tokens.as_slice(), e.target_tokens.as_slice())).collect();
    mle_pairs(params, &pairs).map(|(loss, _, g)| (loss, g))
}

/// Returns (token-mean loss, mean sequence log-probability, gradient).
pub(crate) fn mle_pairs(
    params: &Parameters,
    pairs: &[(&[TokenId], &[TokenId])],
) -> Result<(f64, f64, Vec<f64>), TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::EmptyData("mle batch"));
    }
    let n_tokens: usize = pairs.iter().map(|(_, t)| t.len()).sum();
    if n_tokens == 0 {
        return Err(TrainError::EmptyData("mle targets"));
    }
    let coef = -1.0 / n_tokens as f64;
    let (logps, grad) =
        map_reduce_grad(params.len(), pairs, |(c, t), g| Ok(sequence_log_prob_and_grad(params, c, t, coef, g)?))?;
    let total: f64 = logps.iter().sum();
    Ok((-total / n_tokens as f64, total / pairs.len() as f64, grad))
}

/// Per-batch DPO statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoStats {
    pub loss: f64,
    pub logp_preferred: f64,
    pub logp_rejected: f64,
    /// Mean of `beta * (delta_preferred - delta_rejected)`.
    pub margin: f64,
}

/// Reference log-probabilities `(ln p_ref(y|c), ln p_ref(y-|c))` per triple.
pub fn reference_log_probs(
    reference: &Parameters,
    triples: &[PreferenceTriple],
) -> Result<Vec<(f64, f64)>, TrainError> {
    triples
        .par_iter()
        .map(|t| {
            Ok((
                sequence_log_prob(reference, &t.context_tokens, &t.preferred_tokens)?,
                sequence_log_prob(reference, &t.context_tokens, &t.rejected_tokens)?,
            ))
        })
        .collect()
}

pub(crate) fn dpo_with_reference(
    policy: &Parameters,
    triples: &[PreferenceTriple],
    reference_logps: &[(f64, f64)],
    beta: f64,
    with_grad: bool,
) -> Result<(DpoStats, Vec<f64>), TrainError> {
    if triples.is_empty() {
        return Err(TrainError::EmptyData("dpo batch"));
    }
    if !(beta > 0.0) {
        return Err(TrainError::InvalidConfig(format!("beta must be positive, got {beta}")));
    }
    let n = triples.len() as f64;
    let items: Vec<(&PreferenceTriple, (f64, f64))> = triples.iter().zip(reference_logps.iter().copied()).collect();
    let n_params = if with_grad { policy.len() } else { 0 };
    let (rows, grad) = map_reduce_grad(n_params, &items, |(t, (ref_pos, ref_neg)), g| {
        let pos = forward_tape(policy, &t.context_tokens, &t.preferred_tokens)?;
        let neg = forward_tape(policy, &t.context_tokens, &t.rejected_tokens)?;
        let (lp, ln) = (pos.log_prob(), neg.log_prob());
        let x = beta * ((lp - ref_pos) - (ln - ref_neg));
        if with_grad {
            // d softplus(-x) / dx = -sigmoid(-x)
            let s = sigmoid(-x) * beta / n;
            pos.backward(policy, -s, g);
            neg.backward(policy, s, g);
        }
        Ok((softplus(-x), lp, ln, x))
    })?;
    let mut stats = DpoStats { loss: 0.0, logp_preferred: 0.0, logp_rejected: 0.0, margin: 0.0 };
    for (l, lp, ln, x) in rows {
        stats.loss += l / n;
        stats.logp_preferred += lp / n;
        stats.logp_rejected += ln / n;
        stats.margin += x / n;
    }
    Ok((stats, grad))
}

/// Mean DPO loss over the batch and its gradient with respect to `policy`.
/// `reference` only contributes fixed log-probabilities.
pub fn dpo_loss_and_grad(
    policy: &Parameters,
    reference: &Parameters,
    batch: &[PreferenceTriple],
    beta: f64,
) -> Result<(f64, Vec<f64>), TrainError> {
    if !policy.config().same_shape(reference.config()) {
        return Err(TrainError::InvalidConfig("policy and reference shapes differ".into()));
    }
    let refs = reference_log_probs(reference, batch)?;
    dpo_with_reference(policy, batch, &refs, beta, true).map(|(s, g)| (s.loss, g))
}
