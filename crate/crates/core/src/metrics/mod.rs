//! Automatic faithfulness and quality metrics.
//!
//! The fact oracle is exact on generated corpora because every value and
//! template word is known. BLEU, ROUGE-L and PARENT recall are the usual
//! overlap proxies. Significance tests compare two systems item by item.

mod oracle;
mod overlap;
mod significance;

pub use oracle::{fact_oracle, pairwise_judge, JudgeResult, OracleVerdict};
pub use overlap::{bleu, parent_recall, rouge_l, BLEU_ZERO_LOG_PRECISION};
pub use significance::{mcnemar_test, paired_t_test, student_t_two_sided, welch_t_test, SignificanceResult, TestName};

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("empty candidate or reference")]
    EmptyInput,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("no discordant pairs")]
    NoDiscordantPairs,
    #[error("zero variance in score differences")]
    DegenerateVariance,
    #[error("need at least two samples, got {0}")]
    TooFewSamples(usize),
    #[error("{0}")]
    InvalidArgument(String),
}
