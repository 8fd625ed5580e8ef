//! Synthetic data-to-text corpus.
//!
//! Records are small attribute/value tables over a closed vocabulary. Targets
//! are produced by filling verbalization templates, so every gold sentence is
//! faithful by construction and the fact oracle in [`crate::metrics`] can
//! decide faithfulness exactly.
//!
//! A designated attribute pair is sampled with a configurable correlation
//! (`distractor_rate`). A context-free language model trained on the targets
//! picks up that correlation, which is the statistical prior that mixture
//! decoding later leaks into negatives.

mod io;
mod lexicon;
mod split;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use io::{read_corpus_jsonl, write_corpus_jsonl};
pub use lexicon::{
    reference_templates, reference_vocab, AttrId, AttributeSpec, ClauseTemplate, Lexicon, Piece, Specials, TemplateSet,
    TokenId, ValueId, VocabSpec,
};
pub use split::{split_dataset, SplitDataset, SplitTag};

use crate::rng::{stream_rng, unit_f64};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("invalid corpus config: {0}")]
    InvalidConfig(String),
    #[error("unknown symbol `{0}`")]
    UnknownSymbol(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
    #[error("malformed context at token {position}: {reason}")]
    MalformedContext { position: usize, reason: String },
    #[error("degenerate split: {0}")]
    DegenerateSplit(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One attribute/value pair of a record.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Fact {
    pub attribute: AttrId,
    pub value: ValueId,
    /// Marked for verbalization (summarization family only).
    #[serde(default)]
    pub highlighted: bool,
}

/// Structured input: an entity and its facts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub entity_id: u64,
    pub facts: Vec<Fact>,
}

impl Record {
    /// Checks the record against `lexicon`: known symbols, each value
    /// belonging to its attribute, distinct attributes, at least two facts.
    pub fn validate(&self, lexicon: &Lexicon) -> Result<(), CorpusError> {
        if self.facts.len() < 2 {
            return Err(CorpusError::InvalidRecord(format!("{} facts, need at least 2", self.facts.len())));
        }
        let mut seen = vec![false; lexicon.num_attributes()];
        for f in &self.facts {
            let a = f.attribute.0 as usize;
            if a >= lexicon.num_attributes() {
                return Err(CorpusError::UnknownSymbol(format!("attribute #{a}")));
            }
            if f.value.0 as usize >= lexicon.num_values() {
                return Err(CorpusError::UnknownSymbol(format!("value #{}", f.value.0)));
            }
            if lexicon.value_attribute(f.value) != f.attribute {
                return Err(CorpusError::InvalidRecord(format!(
                    "value `{}` does not belong to `{}`",
                    lexicon.value_surface(f.value),
                    lexicon.attribute_name(f.attribute)
                )));
            }
            if std::mem::replace(&mut seen[a], true) {
                return Err(CorpusError::InvalidRecord(format!(
                    "attribute `{}` repeated",
                    lexicon.attribute_name(f.attribute)
                )));
            }
        }
        Ok(())
    }

    /// Facts a faithful verbalization must express: the highlighted ones if
    /// any are marked, otherwise all of them.
    pub fn expected_facts(&self) -> impl Iterator<Item = &Fact> {
        let any = self.facts.iter().any(|f| f.highlighted);
        self.facts.iter().filter(move |f| !any || f.highlighted)
    }

    pub fn has_value(&self, v: ValueId) -> bool {
        self.facts.iter().any(|f| f.value == v)
    }
}

/// A (context, target) pair.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub record: Record,
    pub context_tokens: Vec<TokenId>,
    pub target_tokens: Vec<TokenId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskFamily {
    /// Record to a description of all of its facts.
    #[default]
    D2t,
    /// Long record to a short verbalization of its highlighted facts.
    Summ,
}

/// Attribute pair whose values are sampled jointly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CooccurrenceBias {
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_records: usize,
    pub task: TaskFamily,
    pub vocab: VocabSpec,
    pub template_set: TemplateSet,
    /// Probability that the biased attribute takes its correlated value
    /// when both attributes of the pair are present.
    pub distractor_rate: f64,
    pub bias: Option<CooccurrenceBias>,
    /// Inclusion probability of each optional attribute.
    pub optional_rate: f64,
    pub max_facts: usize,
    /// Zipf exponent of per-attribute value frequencies (0 = uniform).
    pub value_skew: f64,
    /// Highlighted facts per record in the summarization family.
    pub summary_facts: usize,
    /// Verbalize clauses in random order; otherwise in attribute order.
    pub shuffle_clauses: bool,
    pub max_target_len: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl CorpusConfig {
    pub fn reference() -> Self {
        CorpusConfig {
            num_records: 5500,
            task: TaskFamily::D2t,
            vocab: reference_vocab(),
            template_set: reference_templates(),
            distractor_rate: 0.8,
            bias: Some(CooccurrenceBias { source: "food".into(), target: "area".into() }),
            optional_rate: 0.55,
            max_facts: 6,
            value_skew: 1.0,
            summary_facts: 2,
            shuffle_clauses: false,
            max_target_len: 32,
            seed: 7,
        }
    }

    /// Summarization-style family over the same vocabulary.
    pub fn reference_summ() -> Self {
        CorpusConfig { task: TaskFamily::Summ, optional_rate: 0.85, max_facts: 7, ..Self::reference() }
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: &str| Err(CorpusError::InvalidConfig(m.into()));
        if self.num_records == 0 {
            return bad("num_records must be positive");
        }
        if !(0.0..=1.0).contains(&self.distractor_rate) || !(0.0..=1.0).contains(&self.optional_rate) {
            return bad("probabilities must lie in [0, 1]");
        }
        if self.max_facts < 2 {
            return bad("max_facts must be at least 2");
        }
        if !(self.value_skew >= 0.0) || !self.value_skew.is_finite() {
            return bad("value_skew must be a non-negative real");
        }
        if self.max_target_len == 0 {
            return bad("max_target_len must be positive");
        }
        if self.task == TaskFamily::Summ && self.summary_facts == 0 {
            return bad("summary_facts must be positive");
        }
        Ok(())
    }

    pub fn lexicon(&self) -> Result<Lexicon, CorpusError> {
        Lexicon::new(&self.vocab, &self.template_set)
    }
}

/// Serializes a record as `<attr> a <val> v ... <ctx_end>`; highlighted facts
/// are prefixed with `<hl>`.
pub fn linearize_record(record: &Record, lexicon: &Lexicon) -> Result<Vec<TokenId>, CorpusError> {
    record.validate(lexicon)?;
    let sp = lexicon.specials();
    let mut out = Vec::with_capacity(record.facts.len() * 5 + 1);
    for f in &record.facts {
        if f.highlighted {
            out.push(sp.highlight);
        }
        out.push(sp.attr);
        out.push(lexicon.attribute_token(f.attribute));
        out.push(sp.val);
        out.extend_from_slice(lexicon.value_tokens(f.value));
    }
    out.push(sp.ctx_end);
    Ok(out)
}

/// Inverse of [`linearize_record`] (the entity id is not serialized).
pub fn parse_context(tokens: &[TokenId], lexicon: &Lexicon) -> Result<Vec<Fact>, CorpusError> {
    let sp = lexicon.specials();
    let err = |position: usize, reason: &str| CorpusError::MalformedContext { position, reason: reason.into() };
    let mut facts = Vec::new();
    let mut i = 0;
    loop {
        let Some(&t) = tokens.get(i) else {
            return Err(err(i, "missing context terminator"));
        };
        if t == sp.ctx_end {
            if i + 1 != tokens.len() {
                return Err(err(i + 1, "tokens after context terminator"));
            }
            return Ok(facts);
        }
        let highlighted = t == sp.highlight;
        if highlighted {
            i += 1;
        }
        if tokens.get(i) != Some(&sp.attr) {
            return Err(err(i, "expected attribute separator"));
        }
        let attr_tok = *tokens.get(i + 1).ok_or_else(|| err(i + 1, "truncated fact"))?;
        let attribute = (0..lexicon.num_attributes())
            .map(|a| AttrId(a as u16))
            .find(|&a| lexicon.attribute_token(a) == attr_tok)
            .ok_or_else(|| err(i + 1, "unknown attribute"))?;
        if tokens.get(i + 2) != Some(&sp.val) {
            return Err(err(i + 2, "expected value separator"));
        }
        i += 3;
        let value =
            tokens.get(i).and_then(|&t| lexicon.value_of_token(t)).ok_or_else(|| err(i, "expected value token"))?;
        let vt = lexicon.value_tokens(value);
        if tokens.get(i..i + vt.len()) != Some(vt) {
            return Err(err(i, "partial multi-word value"));
        }
        i += vt.len();
        facts.push(Fact { attribute, value, highlighted });
    }
}

fn zipf_pick<R: Rng>(rng: &mut R, n: usize, skew: f64) -> usize {
    let total: f64 = (0..n).map(|k| ((k + 1) as f64).powf(-skew)).sum();
    let mut u = unit_f64(rng) * total;
    for k in 0..n {
        u -= ((k + 1) as f64).powf(-skew);
        if u < 0.0 {
            return k;
        }
    }
    n - 1
}

fn fill(pieces: &[Piece], record: &Record, lexicon: &Lexicon, out: &mut Vec<TokenId>) {
    for p in pieces {
        match *p {
            Piece::Word(w) => out.push(w),
            Piece::Slot(a) => {
                let f = record.facts.iter().find(|f| f.attribute == a).expect("slot attribute present");
                out.extend_from_slice(lexicon.value_tokens(f.value));
            }
        }
    }
}

fn sample_record<R: Rng>(
    cfg: &CorpusConfig,
    lexicon: &Lexicon,
    entity_id: u64,
    rng: &mut R,
) -> Result<Record, CorpusError> {
    let n_attr = lexicon.num_attributes();
    let attrs = (0..n_attr).map(|a| AttrId(a as u16));
    let required: Vec<AttrId> = attrs.clone().filter(|&a| lexicon.is_required(a)).collect();
    let optional: Vec<AttrId> =
        attrs.filter(|&a| !lexicon.is_required(a) && !lexicon.attributes[a.0 as usize].clauses.is_empty()).collect();
    if cfg.task == TaskFamily::D2t && !required.is_empty() && lexicon.heads.is_empty() {
        return Err(CorpusError::InvalidConfig("required attributes need a head template".into()));
    }
    if required.len() > cfg.max_facts {
        return Err(CorpusError::InvalidConfig("more required attributes than max_facts".into()));
    }

    let mut chosen: Vec<AttrId> = optional.iter().copied().filter(|_| unit_f64(rng) < cfg.optional_rate).collect();
    let min_optional = match cfg.task {
        TaskFamily::D2t => 2usize.saturating_sub(required.len()),
        TaskFamily::Summ => cfg.summary_facts.max(2usize.saturating_sub(required.len())),
    };
    if optional.len() < min_optional {
        return Err(CorpusError::InvalidConfig("not enough optional attributes for a valid record".into()));
    }
    while chosen.len() < min_optional {
        let rest: Vec<AttrId> = optional.iter().copied().filter(|a| !chosen.contains(a)).collect();
        chosen.push(rest[rng.random_range(0..rest.len())]);
    }
    while required.len() + chosen.len() > cfg.max_facts {
        let i = rng.random_range(0..chosen.len());
        chosen.remove(i);
    }
    let mut present: Vec<AttrId> = required.iter().copied().chain(chosen).collect();
    present.sort();

    let mut facts: Vec<Fact> = present
        .iter()
        .map(|&a| {
            let vals = lexicon.values_of(a);
            Fact { attribute: a, value: vals[zipf_pick(rng, vals.len(), cfg.value_skew)], highlighted: false }
        })
        .collect();

    if let Some(bias) = &cfg.bias {
        let src = lexicon.attribute(&bias.source).ok_or_else(|| CorpusError::UnknownSymbol(bias.source.clone()))?;
        let dst = lexicon.attribute(&bias.target).ok_or_else(|| CorpusError::UnknownSymbol(bias.target.clone()))?;
        let u = unit_f64(rng);
        let src_rank = facts
            .iter()
            .find(|f| f.attribute == src)
            .map(|f| lexicon.values_of(src).iter().position(|&v| v == f.value).unwrap());
        if let (Some(rank), Some(df)) = (src_rank, facts.iter_mut().find(|f| f.attribute == dst)) {
            if u < cfg.distractor_rate {
                let dv = lexicon.values_of(dst);
                df.value = dv[rank % dv.len()];
            }
        }
    }

    if cfg.task == TaskFamily::Summ {
        let mut opt_idx: Vec<usize> =
            facts.iter().enumerate().filter(|(_, f)| !lexicon.is_required(f.attribute)).map(|(i, _)| i).collect();
        opt_idx.shuffle(rng);
        for &i in opt_idx.iter().take(cfg.summary_facts) {
            facts[i].highlighted = true;
        }
    }
    Ok(Record { entity_id, facts })
}

fn verbalize<R: Rng>(record: &Record, config: &CorpusConfig, lexicon: &Lexicon, rng: &mut R) -> Vec<TokenId> {
    let task = config.task;
    let mut out = Vec::new();
    let mut clause_facts: Vec<&Fact> = match task {
        TaskFamily::D2t => {
            if !lexicon.heads.is_empty() {
                let head = &lexicon.heads[rng.random_range(0..lexicon.heads.len())];
                fill(head, record, lexicon, &mut out);
            }
            record.facts.iter().filter(|f| !lexicon.is_required(f.attribute)).collect()
        }
        TaskFamily::Summ => record.facts.iter().filter(|f| f.highlighted).collect(),
    };
    if config.shuffle_clauses {
        clause_facts.shuffle(rng);
    }
    let n = clause_facts.len();
    for (i, f) in clause_facts.into_iter().enumerate() {
        if n >= 2 && i == n - 1 {
            out.push(lexicon.conjunction);
        }
        let variants = &lexicon.attributes[f.attribute.0 as usize].clauses;
        let pieces = &variants[rng.random_range(0..variants.len())];
        fill(pieces, record, lexicon, &mut out);
    }
    out.push(lexicon.terminator);
    out.push(lexicon.specials().eos);
    out
}

/// Generates `config.num_records` examples. Pure function of the config.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Vec<Example>, CorpusError> {
    config.validate()?;
    let lexicon = config.lexicon()?;
    let mut rng = stream_rng(config.seed, 0);
    let mut out = Vec::with_capacity(config.num_records);
    for i in 0..config.num_records {
        let record = sample_record(config, &lexicon, i as u64, &mut rng)?;
        let target_tokens = verbalize(&record, config, &lexicon, &mut rng);
        if target_tokens.len() > config.max_target_len {
            return Err(CorpusError::InvalidConfig(format!(
                "target of {} tokens exceeds max_target_len {}",
                target_tokens.len(),
                config.max_target_len
            )));
        }
        let context_tokens = linearize_record(&record, &lexicon)?;
        out.push(Example { record, context_tokens, target_tokens });
    }
    Ok(out)
}
