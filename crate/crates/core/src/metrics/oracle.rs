use serde::{Deserialize, Serialize};

use crate::corpus::{Lexicon, Record, TokenId, ValueId};

/// Exact faithfulness verdict of a candidate against its record.
///
/// `score` is the minimum of the omission and hallucination sub-scores, so a
/// text is fully faithful only if it expresses every expected fact and
/// asserts no value outside the record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleVerdict {
    pub entailed_facts: usize,
    pub omitted_facts: usize,
    pub hallucinated_values: usize,
    pub omission_score: f64,
    pub hallucination_score: f64,
    pub score: f64,
}

fn occurs_with_cue(candidate: &[TokenId], value: ValueId, lexicon: &Lexicon) -> bool {
    let vt = lexicon.value_tokens(value);
    let attr = lexicon.value_attribute(value);
    let (pre, post) = (lexicon.pre_cues(attr), lexicon.post_cues(attr));
    if candidate.len() < vt.len() {
        return false;
    }
    (0..=candidate.len() - vt.len()).any(|i| {
        candidate[i..i + vt.len()] == *vt
            && ((i > 0 && pre.contains(&candidate[i - 1]))
                || candidate.get(i + vt.len()).is_some_and(|t| post.contains(t)))
    })
}

/// Counts foreign value mentions; consecutive tokens of one multi-word value
/// count once.
fn count_hallucinations(candidate: &[TokenId], record: &Record, lexicon: &Lexicon) -> usize {
    let mut count = 0;
    let mut prev: Option<(ValueId, usize)> = None;
    for &t in candidate {
        let cur = lexicon.value_of_token(t).map(|v| {
            let pos = lexicon.value_tokens(v).iter().position(|&x| x == t).unwrap();
            (v, pos)
        });
        if let Some((v, pos)) = cur {
            let continues = matches!(prev, Some((pv, pp)) if pv == v && pp + 1 == pos);
            if !continues && !record.has_value(v) {
                count += 1;
            }
        }
        prev = cur;
    }
    count
}

/// Decides which expected facts the candidate entails and how many foreign
/// values it asserts.
///
/// A fact is entailed when its value tokens occur contiguously next to a
/// template word that cues its attribute (the word before or after the slot
/// in some template). Tokens outside the value vocabulary are ignored.
pub fn fact_oracle(candidate: &[TokenId], record: &Record, lexicon: &Lexicon) -> OracleVerdict {
    let expected: Vec<_> = record.expected_facts().collect();
    let entailed = expected.iter().filter(|f| occurs_with_cue(candidate, f.value, lexicon)).count();
    let hallucinated = count_hallucinations(candidate, record, lexicon);
    let omission_score = if expected.is_empty() { 1.0 } else { entailed as f64 / expected.len() as f64 };
    let hallucination_score = 1.0 / (1.0 + hallucinated as f64);
    OracleVerdict {
        entailed_facts: entailed,
        omitted_facts: expected.len() - entailed,
        hallucinated_values: hallucinated,
        omission_score,
        hallucination_score,
        score: omission_score.min(hallucination_score),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum JudgeResult {
    WinA,
    WinB,
    Tie,
}

impl JudgeResult {
    pub fn swapped(self) -> Self {
        match self {
            JudgeResult::WinA => JudgeResult::WinB,
            JudgeResult::WinB => JudgeResult::WinA,
            JudgeResult::Tie => JudgeResult::Tie,
        }
    }
}

/// Pairwise faithfulness preference: fewer hallucinated values wins; ties
/// on that are broken by fewer omitted facts.
pub fn pairwise_judge(record: &Record, text_a: &[TokenId], text_b: &[TokenId], lexicon: &Lexicon) -> JudgeResult {
    let a = fact_oracle(text_a, record, lexicon);
    let b = fact_oracle(text_b, record, lexicon);
    match (a.hallucinated_values, a.omitted_facts).cmp(&(b.hallucinated_values, b.omitted_facts)) {
        std::cmp::Ordering::Less => JudgeResult::WinA,
        std::cmp::Ordering::Greater => JudgeResult::WinB,
        std::cmp::Ordering::Equal => JudgeResult::Tie,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusConfig, Fact};

    fn setup() -> (Lexicon, Record) {
        let lex = CorpusConfig::reference().lexicon().unwrap();
        let f = |a: &str, v: &str| Fact {
            attribute: lex.attribute(a).unwrap(),
            value: lex.value(a, v).unwrap(),
            highlighted: false,
        };
        let r = Record {
            entity_id: 1,
            facts: vec![f("name", "Vaults"), f("type", "pub"), f("area", "city centre"), f("near", "Raja")],
        };
        (lex, r)
    }

    #[test]
    fn gold_sentence_scores_one() {
        let (lex, r) = setup();
        let c = lex.encode("Vaults is a pub in the city centre and near Raja . <eos>").unwrap();
        let v = fact_oracle(&c, &r, &lex);
        assert_eq!(v.score, 1.0);
        assert_eq!(v.entailed_facts, 4);
    }

    #[test]
    fn three_correct_one_foreign() {
        let (lex, r) = setup();
        // `near Sicilia` replaces `near Raja`: one omission, one hallucination.
        let c = lex.encode("Vaults is a pub in the city centre and near Sicilia .").unwrap();
        let v = fact_oracle(&c, &r, &lex);
        assert_eq!((v.entailed_facts, v.omitted_facts, v.hallucinated_values), (3, 1, 1));
        assert_eq!(v.omission_score, 0.75);
        assert_eq!(v.hallucination_score, 0.5);
        assert_eq!(v.score, 0.5);
    }

    #[test]
    fn value_without_cue_is_not_entailed() {
        let (lex, r) = setup();
        let c = lex.encode("Vaults is a pub Raja in the city centre .").unwrap();
        let v = fact_oracle(&c, &r, &lex);
        assert_eq!(v.omitted_facts, 1);
        assert_eq!(v.hallucinated_values, 0);
    }

    #[test]
    fn multiword_foreign_value_counts_once() {
        let (lex, r) = setup();
        let c = lex.encode("Vaults is a pub in the city centre near Burger King and near Raja .").unwrap();
        assert_eq!(fact_oracle(&c, &r, &lex).hallucinated_values, 1);
        let c = lex.encode("Vaults is a pub in the city centre near Burger Burger and near Raja .").unwrap();
        assert_eq!(fact_oracle(&c, &r, &lex).hallucinated_values, 2);
    }

    #[test]
    fn judge_prefers_fewer_hallucinations() {
        let (lex, r) = setup();
        let gold = lex.encode("Vaults is a pub in the city centre and near Raja .").unwrap();
        let injected = lex.encode("Vaults is a pub in the city centre near Raja and rated good .").unwrap();
        assert_eq!(pairwise_judge(&r, &gold, &injected, &lex), JudgeResult::WinA);
        assert_eq!(pairwise_judge(&r, &gold, &gold, &lex), JudgeResult::Tie);
        // A: one hallucination, no omissions. B: no hallucinations, two omissions.
        let a = lex.encode("Vaults is a pub in the city centre near Raja with cheap prices .").unwrap();
        let b = lex.encode("Vaults is a pub .").unwrap();
        let (va, vb) = (fact_oracle(&a, &r, &lex), fact_oracle(&b, &r, &lex));
        assert_eq!((va.hallucinated_values, va.omitted_facts), (1, 0));
        assert_eq!((vb.hallucinated_values, vb.omitted_facts), (0, 2));
        assert_eq!(pairwise_judge(&r, &a, &b, &lex), JudgeResult::WinB);
        assert_eq!(pairwise_judge(&r, &b, &a, &lex), JudgeResult::WinA);
    }
}
