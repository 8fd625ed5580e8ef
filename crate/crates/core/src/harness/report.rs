use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::corpus::{Example, Lexicon, Specials, TokenId};
use crate::metrics::{
    bleu, fact_oracle, mcnemar_test, paired_t_test, pairwise_judge, parent_recall, rouge_l, JudgeResult, OracleVerdict,
    SignificanceResult,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeCounts {
    pub win: usize,
    pub tie: usize,
    pub loss: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Significance {
    pub mcnemar: Option<SignificanceResult>,
    pub paired_t: Option<SignificanceResult>,
}

/// Held-out metrics of one system. Judge counts and significance are
/// relative to the report's reference system and absent for it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemReport {
    pub bleu: f64,
    pub rouge_l: f64,
    pub parent_recall: f64,
    pub oracle_omission: f64,
    /// Mean hallucination sub-score `1 / (1 + count)`.
    pub oracle_hallucination: f64,
    pub oracle_score: f64,
    /// Fraction of outputs with at least one hallucinated value.
    pub hallucination_rate: f64,
    pub judge: Option<JudgeCounts>,
    pub significance: Option<Significance>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_examples: usize,
    pub reference_system: String,
    pub systems: BTreeMap<String, SystemReport>,
}

pub const CSV_METRICS: [&str; 7] = [
    "bleu",
    "rouge_l",
    "parent_recall",
    "oracle_omission",
    "oracle_hallucination",
    "oracle_score",
    "hallucination_rate",
];

impl SystemReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        Some(match name {
            "bleu" => self.bleu,
            "rouge_l" => self.rouge_l,
            "parent_recall" => self.parent_recall,
            "oracle_omission" => self.oracle_omission,
            "oracle_hallucination" => self.oracle_hallucination,
            "oracle_score" => self.oracle_score,
            "hallucination_rate" => self.hallucination_rate,
            _ => return None,
        })
    }
}

fn strip_eos(tokens: &[TokenId]) -> &[TokenId] {
    match tokens.last() {
        Some(&t) if t == Specials::fixed().eos => &tokens[..tokens.len() - 1],
        _ => tokens,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Scores decoded outputs against the held-out examples.
///
/// `outputs[name][i]` is the output of system `name` for `examples[i]`.
/// BLEU and ROUGE-L ignore the trailing eos; an empty output gets ROUGE-L 0.
pub fn evaluate_outputs(
    lexicon: &Lexicon,
    examples: &[Example],
    outputs: &BTreeMap<String, Vec<Vec<TokenId>>>,
    reference_system: &str,
) -> Result<EvalReport, HarnessError> {
    let reference = outputs
        .get(reference_system)
        .ok_or_else(|| HarnessError::Config(format!("no outputs for reference system `{reference_system}`")))?;
    let refs: Vec<&[TokenId]> = examples.iter().map(|e| strip_eos(&e.target_tokens)).collect();
    let verdicts_of = |outs: &[Vec<TokenId>]| -> Vec<OracleVerdict> {
        outs.iter().zip(examples).map(|(o, e)| fact_oracle(o, &e.record, lexicon)).collect()
    };
    let ref_verdicts = verdicts_of(reference);
    let mut systems = BTreeMap::new();
    for (name, outs) in outputs {
        if outs.len() != examples.len() {
            return Err(HarnessError::Config(format!(
                "system `{name}` has {} outputs for {} examples",
                outs.len(),
                examples.len()
            )));
        }
        let cands: Vec<&[TokenId]> = outs.iter().map(|o| strip_eos(o)).collect();
        let verdicts = verdicts_of(outs);
        let judge_and_sig = if name == reference_system {
            None
        } else {
            let mut j = JudgeCounts { win: 0, tie: 0, loss: 0 };
            for ((o, r), e) in outs.iter().zip(reference).zip(examples) {
                match pairwise_judge(&e.record, o, r, lexicon) {
                    JudgeResult::WinA => j.win += 1,
                    JudgeResult::WinB => j.loss += 1,
                    JudgeResult::Tie => j.tie += 1,
                }
            }
            let a: Vec<f64> = verdicts.iter().map(|v| v.score).collect();
            let b: Vec<f64> = ref_verdicts.iter().map(|v| v.score).collect();
            let sig = Significance {
                mcnemar: mcnemar_test(j.win as u64, j.loss as u64).ok(),
                paired_t: paired_t_test(&a, &b).ok(),
            };
            Some((j, sig))
        };
        systems.insert(
            name.clone(),
            SystemReport {
                bleu: bleu(&cands, &refs, 4)?,
                rouge_l: mean(cands.iter().zip(&refs).map(|(c, r)| {
                    if c.is_empty() {
                        0.0
                    } else {
                        rouge_l(c, r).unwrap_or(0.0)
                    }
                })),
                parent_recall: mean(cands.iter().zip(examples).map(|(c, e)| parent_recall(c, &e.record, lexicon, 4))),
                oracle_omission: mean(verdicts.iter().map(|v| v.omission_score)),
                oracle_hallucination: mean(verdicts.iter().map(|v| v.hallucination_score)),
                oracle_score: mean(verdicts.iter().map(|v| v.score)),
                hallucination_rate: mean(verdicts.iter().map(|v| (v.hallucinated_values > 0) as u8 as f64)),
                judge: judge_and_sig.map(|x| x.0),
                significance: judge_and_sig.map(|x| x.1),
            },
        );
    }
    Ok(EvalReport { n_examples: examples.len(), reference_system: reference_system.into(), systems })
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// One row per (system, metric) in sorted system order.
    pub fn to_csv(&self) -> Result<String, HarnessError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["system", "metric", "value"])?;
        for (name, sys) in &self.systems {
            for m in CSV_METRICS {
                w.write_record([name.as_str(), m, &sys.metric(m).unwrap().to_string()])?;
            }
        }
        let bytes = w.into_inner().map_err(|e| HarnessError::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    pub fn system(&self, name: &str) -> Result<&SystemReport, HarnessError> {
        self.systems.get(name).ok_or_else(|| HarnessError::Config(format!("report has no system `{name}`")))
    }
}

/// Writes `eval_report.json` and `eval_report.csv` under `dir`. The output
/// depends only on the report, so repeated calls produce identical files.
pub fn emit_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<(), HarnessError> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("eval_report.json"), report.to_json())?;
    std::fs::write(dir.join("eval_report.csv"), report.to_csv()?)?;
    Ok(())
}

pub fn load_report(path: impl AsRef<Path>) -> Result<EvalReport, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))
}
