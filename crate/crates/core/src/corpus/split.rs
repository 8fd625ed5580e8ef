use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Example};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitTag {
    D1,
    D2,
    Heldout,
}

/// Held-out set plus the two training halves: D1 for supervised
/// fine-tuning, D2 for preference tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub d1: Vec<Example>,
    pub d2: Vec<Example>,
    pub heldout: Vec<Example>,
    pub split_ratio: f64,
}

impl SplitDataset {
    /// D1 followed by D2.
    pub fn train(&self) -> Vec<Example> {
        self.d1.iter().chain(&self.d2).cloned().collect()
    }

    pub fn tagged(&self) -> impl Iterator<Item = (SplitTag, &Example)> {
        self.d1
            .iter()
            .map(|e| (SplitTag::D1, e))
            .chain(self.d2.iter().map(|e| (SplitTag::D2, e)))
            .chain(self.heldout.iter().map(|e| (SplitTag::Heldout, e)))
    }
}

/// Uniform random permutation split. The held-out set is carved first; the
/// remaining train examples are divided so that `|d1| = round(ratio * |train|)`.
pub fn split_dataset(
    examples: &[Example],
    ratio: f64,
    heldout_count: usize,
    seed: u64,
) -> Result<SplitDataset, CorpusError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::DegenerateSplit(format!("ratio {ratio} outside (0, 1)")));
    }
    if heldout_count >= examples.len() {
        return Err(CorpusError::DegenerateSplit(format!(
            "held-out count {heldout_count} leaves no training data out of {}",
            examples.len()
        )));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut stream_rng(seed, 0));
    let (held, train) = order.split_at(heldout_count);
    let n1 = (ratio * train.len() as f64).round() as usize;
    if n1 == 0 || n1 == train.len() {
        return Err(CorpusError::DegenerateSplit(format!(
            "ratio {ratio} over {} train examples leaves an empty half",
            train.len()
        )));
    }
    let pick = |idx: &[usize]| idx.iter().map(|&i| examples[i].clone()).collect::<Vec<_>>();
    Ok(SplitDataset { d1: pick(&train[..n1]), d2: pick(&train[n1..]), heldout: pick(held), split_ratio: ratio })
}
