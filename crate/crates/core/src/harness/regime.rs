use serde::{Deserialize, Serialize};

use crate::training::TrainingTrace;

/// Behaviour of a preference-tuning run, read off its trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegimeLabel {
    /// The preferred sequences lose likelihood.
    Degenerate,
    /// The margin grows gradually without likelihood collapse.
    Effective,
    /// The margin is essentially saturated after the first updates.
    Trivial,
}

impl std::fmt::Display for RegimeLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegimeLabel::Degenerate => "degenerate",
            RegimeLabel::Effective => "effective",
            RegimeLabel::Trivial => "trivial",
        })
    }
}

/// Labels a trace.
///
/// * degenerate: final `logp_preferred` is below the initial one by more than `epsilon`;
/// * trivial: the margin at the first row logged after an update already
///   exceeds 90% of the final (positive) margin;
/// * effective: otherwise.
///
/// Rows at step 0 are logged before any update, so their margin is zero by
/// construction and cannot be used for the trivial test. Traces with a
/// single row are effective unless degenerate.
pub fn classify_regime(trace: &TrainingTrace, epsilon: f64) -> RegimeLabel {
    let (Some(first), Some(last)) = (trace.first(), trace.last()) else {
        return RegimeLabel::Effective;
    };
    if last.logp_preferred < first.logp_preferred - epsilon {
        return RegimeLabel::Degenerate;
    }
    let final_margin = last.margin.unwrap_or(0.0);
    let early = trace.rows.iter().find(|r| r.step > first.step).and_then(|r| r.margin);
    match early {
        Some(m) if final_margin > 0.0 && m > 0.9 * final_margin => RegimeLabel::Trivial,
        _ => RegimeLabel::Effective,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::TraceRow;

    fn trace(rows: &[(u64, f64, f64)]) -> TrainingTrace {
        TrainingTrace {
            rows: rows
                .iter()
                .map(|&(step, lp, margin)| TraceRow {
                    step,
                    loss: 0.5,
                    logp_preferred: lp,
                    logp_rejected: Some(lp - margin),
                    margin: Some(margin),
                })
                .collect(),
        }
    }

    #[test]
    fn three_regimes() {
        let degenerate = trace(&[(0, -10.0, 0.0), (10, -10.5, 0.2), (20, -12.0, 0.6)]);
        assert_eq!(classify_regime(&degenerate, 0.2), RegimeLabel::Degenerate);
        let effective = trace(&[(0, -10.0, 0.0), (10, -9.9, 0.3), (20, -9.8, 1.0), (30, -9.8, 2.0)]);
        assert_eq!(classify_regime(&effective, 0.2), RegimeLabel::Effective);
        let trivial = trace(&[(0, -10.0, 0.0), (10, -10.0, 4.9), (20, -10.0, 5.0)]);
        assert_eq!(classify_regime(&trivial, 0.2), RegimeLabel::Trivial);
    }

    #[test]
    fn total_on_edge_cases() {
        assert_eq!(classify_regime(&TrainingTrace::default(), 0.2), RegimeLabel::Effective);
        assert_eq!(classify_regime(&trace(&[(0, -3.0, 0.0)]), 0.2), RegimeLabel::Effective);
        // Shrinking margins are never trivial.
        assert_eq!(
            classify_regime(&trace(&[(0, -3.0, 0.0), (10, -3.0, -1.0), (20, -3.0, -1.0)]), 0.2),
            RegimeLabel::Effective
        );
        // A drop of exactly epsilon is tolerated.
        assert_eq!(
            classify_regime(&trace(&[(0, -3.0, 0.0), (10, -3.25, 1.0), (20, -3.25, 2.0)]), 0.25),
            RegimeLabel::Effective
        );
    }
}
