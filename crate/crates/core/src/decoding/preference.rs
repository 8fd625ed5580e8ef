use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;

use super::{noisy_generation, DecodeConfig, DecodeError, NoiseConfig};
use crate::corpus::Example;
use crate::model::Parameters;
use crate::training::PreferenceTriple;

/// One triple per example: the gold target is preferred, a noisy generation
/// is rejected.
///
/// The random stream of each example is its entity id, so a negative does
/// not change when the examples are reordered or subset.
pub fn build_preference_dataset(
    d2: &[Example],
    p_lm: &Parameters,
    p_theta0: &Parameters,
    noise: &NoiseConfig,
    cfg: &DecodeConfig,
) -> Result<Vec<PreferenceTriple>, DecodeError> {
    d2.par_iter()
        .map(|ex| {
            let stream = ex.record.entity_id;
            let rejected = noisy_generation(&ex.context_tokens, p_lm, p_theta0, noise, &cfg.with_stream(stream))?;
            Ok(PreferenceTriple::new(
                ex.context_tokens.clone(),
                ex.target_tokens.clone(),
                rejected,
                noise.alpha,
                stream,
            ))
        })
        .collect()
}

pub fn write_preference_jsonl(triples: &[PreferenceTriple], path: impl AsRef<Path>) -> Result<(), DecodeError> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for t in triples {
        serde_json::to_writer(&mut w, t).map_err(|e| DecodeError::Json { line: 0, source: e })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_preference_jsonl(path: impl AsRef<Path>) -> Result<Vec<PreferenceTriple>, DecodeError> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| DecodeError::Json { line: i + 1, source: e })?);
    }
    Ok(out)
}
