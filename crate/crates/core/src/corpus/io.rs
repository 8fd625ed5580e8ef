use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, Example, Record, SplitDataset, SplitTag, TokenId};

#[derive(Serialize, Deserialize)]
struct Line {
    record: Record,
    context_tokens: Vec<TokenId>,
    target_tokens: Vec<TokenId>,
    split: SplitTag,
}

/// Writes one JSON object per example, tagged with its partition.
pub fn write_corpus_jsonl(split: &SplitDataset, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for (tag, e) in split.tagged() {
        let line = Line {
            record: e.record.clone(),
            context_tokens: e.context_tokens.clone(),
            target_tokens: e.target_tokens.clone(),
            split: tag,
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| CorpusError::InvalidRecord(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus_jsonl(path: impl AsRef<Path>, split_ratio: f64) -> Result<SplitDataset, CorpusError> {
    let mut out = SplitDataset { d1: vec![], d2: vec![], heldout: vec![], split_ratio };
    for (i, line) in BufReader::new(std::fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let l: Line =
            serde_json::from_str(&line).map_err(|e| CorpusError::InvalidRecord(format!("line {}: {e}", i + 1)))?;
        let ex = Example { record: l.record, context_tokens: l.context_tokens, target_tokens: l.target_tokens };
        match l.split {
            SplitTag::D1 => out.d1.push(ex),
            SplitTag::D2 => out.d2.push(ex),
            SplitTag::Heldout => out.heldout.push(ex),
        }
    }
    Ok(out)
}
