//! Reference- and table-overlap metrics: corpus BLEU, ROUGE-L and PARENT recall.

use std::collections::HashMap;
use std::hash::Hash;

use super::MetricError;
use crate::corpus::{Lexicon, Record, TokenId};

/// Log-precision assigned to an order with no matches (floor smoothing).
pub const BLEU_ZERO_LOG_PRECISION: f64 = -9.0;

fn ngram_counts<T: Hash + Eq>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus BLEU on a 0-100 scale.
///
/// Clipped n-gram matches and candidate n-gram totals are summed over the
/// corpus before taking precisions; the brevity penalty uses total lengths.
/// If unigram precision is zero the score is 0. A zero precision at a higher
/// order contributes `exp(-9)` to the geometric mean instead.
pub fn bleu<T: Hash + Eq, C: AsRef<[T]>, R: AsRef<[T]>>(
    candidates: &[C],
    references: &[R],
    max_order: usize,
) -> Result<f64, MetricError> {
    if candidates.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    if candidates.len() != references.len() {
        return Err(MetricError::LengthMismatch(candidates.len(), references.len()));
    }
    if max_order == 0 {
        return Err(MetricError::InvalidArgument("max_order must be at least 1".into()));
    }
    let mut matches = vec![0usize; max_order];
    let mut totals = vec![0usize; max_order];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let (c, r) = (c.as_ref(), r.as_ref());
        cand_len += c.len();
        ref_len += r.len();
        for n in 1..=max_order {
            let rc = ngram_counts(r, n);
            for (g, k) in ngram_counts(c, n) {
                matches[n - 1] += k.min(rc.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += c.len().saturating_sub(n - 1);
        }
    }
    if matches[0] == 0 || cand_len == 0 {
        return Ok(0.0);
    }
    let log_mean = (0..max_order)
        .map(|i| if matches[i] == 0 { BLEU_ZERO_LOG_PRECISION } else { (matches[i] as f64 / totals[i] as f64).ln() })
        .sum::<f64>()
        / max_order as f64;
    let bp = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    Ok(100.0 * bp * log_mean.exp())
}

fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-L F1 (beta = 1) from the longest common subsequence.
pub fn rouge_l<T: Eq>(candidate: &[T], reference: &[T]) -> Result<f64, MetricError> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(MetricError::EmptyInput);
    }
    let l = lcs_len(candidate, reference) as f64;
    if l == 0.0 {
        return Ok(0.0);
    }
    let p = l / candidate.len() as f64;
    let r = l / reference.len() as f64;
    Ok(2.0 * p * r / (p + r))
}

/// PARENT-style recall of the candidate against the record's value n-grams.
///
/// For each order `n` in `1..=max_order`, table n-grams are taken within
/// each expected fact's value tokens (never across values); the recall at
/// that order is clipped matches over the number of table n-grams. The
/// result averages the orders that have at least one table n-gram.
pub fn parent_recall(candidate: &[TokenId], record: &Record, lexicon: &Lexicon, max_order: usize) -> f64 {
    if candidate.is_empty() || max_order == 0 {
        return 0.0;
    }
    let mut sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_order {
        let mut table: HashMap<&[TokenId], usize> = HashMap::new();
        for f in record.expected_facts() {
            for (g, k) in ngram_counts(lexicon.value_tokens(f.value), n) {
                *table.entry(g).or_insert(0) += k;
            }
        }
        let total: usize = table.values().sum();
        if total == 0 {
            continue;
        }
        let cand = ngram_counts(candidate, n);
        let matched: usize = table.iter().map(|(g, &k)| k.min(cand.get(g).copied().unwrap_or(0))).sum();
        sum += matched as f64 / total as f64;
        orders += 1;
    }
    if orders == 0 {
        0.0
    } else {
        sum / orders as f64
    }
}
