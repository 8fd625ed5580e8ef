use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::regime::{classify_regime, RegimeLabel};
use super::report::evaluate_outputs;
use super::workspace::{Workspace, REFERENCE_SYSTEM};
use super::HarnessError;
use crate::metrics::fact_oracle;

/// One cell of a sweep. Metric fields are empty when the cell failed, in
/// which case `error` holds the message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Swept parameter: `alpha`, `beta` or `split`.
    pub param: String,
    pub value: f64,
    pub seed: u64,
    pub split_ratio: f64,
    pub alpha: f64,
    pub beta: f64,
    /// Mean oracle score of the generated negatives.
    pub negative_oracle_score: Option<f64>,
    /// Held-out oracle score of the preference-tuned model.
    pub oracle_score: Option<f64>,
    pub hallucination_rate: Option<f64>,
    pub bleu: Option<f64>,
    /// Held-out oracle score of the stage-one model of this cell.
    pub sft_d1_oracle_score: Option<f64>,
    pub sft_full_oracle_score: Option<f64>,
    pub regime: Option<RegimeLabel>,
    pub logp_preferred_start: Option<f64>,
    pub logp_preferred_end: Option<f64>,
    pub margin_end: Option<f64>,
    /// Compact JSON of the cell's full configuration.
    pub config: String,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Alpha,
    Beta,
    Split,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
            SweepParam::Split => "split",
        }
    }
}

fn empty_row(ws: &Workspace, param: SweepParam, value: f64, ratio: f64, alpha: f64, beta: f64) -> SweepRow {
    let cfg = ws.config();
    let cell = json!({
        "seed": cfg.seed,
        "split_ratio": ratio,
        "alpha": alpha,
        "beta": beta,
        "corpus_records": cfg.corpus.num_records,
        "heldout_count": cfg.heldout_count,
        "model": cfg.model,
        "pretrain": cfg.pretrain,
        "sft": cfg.sft,
        "dpo": cfg.dpo,
        "negative_decode": cfg.negative_decode,
        "eval_decode": cfg.eval_decode,
    });
    SweepRow {
        param: param.name().into(),
        value,
        seed: cfg.seed,
        split_ratio: ratio,
        alpha,
        beta,
        negative_oracle_score: None,
        oracle_score: None,
        hallucination_rate: None,
        bleu: None,
        sft_d1_oracle_score: None,
        sft_full_oracle_score: None,
        regime: None,
        logp_preferred_start: None,
        logp_preferred_end: None,
        margin_end: None,
        config: cell.to_string(),
        error: None,
    }
}

/// Runs the cell `(ratio, alpha, beta)` and fills in its metrics.
fn run_cell(ws: &mut Workspace, row: &mut SweepRow) -> Result<(), HarnessError> {
    let (ratio, alpha, beta) = (row.split_ratio, row.alpha, row.beta);
    let eps = ws.config().regime_epsilon;
    let split = ws.split(ratio)?;
    let triples = ws.preferences(ratio, alpha)?;
    let d2_by_id: BTreeMap<u64, &crate::corpus::Example> = split.d2.iter().map(|e| (e.record.entity_id, e)).collect();
    let neg: f64 = triples
        .iter()
        .map(|t| fact_oracle(&t.rejected_tokens, &d2_by_id[&t.rng_stream_id].record, ws.lexicon()).score)
        .sum::<f64>()
        / triples.len() as f64;
    let run = ws.scope(ratio, alpha, beta)?;
    let p0 = ws.p_theta0(ratio)?;
    let sft_full = ws.sft_full()?;
    let heldout = &split.heldout;
    let mut outs = BTreeMap::new();
    outs.insert("scope".to_string(), ws.decode_plain(&run.params, heldout)?);
    outs.insert("sft_d1".to_string(), ws.decode_plain(&p0, heldout)?);
    outs.insert(REFERENCE_SYSTEM.to_string(), ws.decode_plain(&sft_full, heldout)?);
    let report = evaluate_outputs(ws.lexicon(), heldout, &outs, REFERENCE_SYSTEM)?;
    let scope = report.system("scope")?;
    row.negative_oracle_score = Some(neg);
    row.oracle_score = Some(scope.oracle_score);
    row.hallucination_rate = Some(scope.hallucination_rate);
    row.bleu = Some(scope.bleu);
    row.sft_d1_oracle_score = Some(report.system("sft_d1")?.oracle_score);
    row.sft_full_oracle_score = Some(report.system(REFERENCE_SYSTEM)?.oracle_score);
    row.regime = Some(classify_regime(&run.trace, eps));
    row.logp_preferred_start = run.trace.first().map(|r| r.logp_preferred);
    row.logp_preferred_end = run.trace.last().map(|r| r.logp_preferred);
    row.margin_end = run.trace.last().and_then(|r| r.margin);
    Ok(())
}

fn sweep(ws: &mut Workspace, param: SweepParam, grid: &[f64]) -> Result<Vec<SweepRow>, HarnessError> {
    let cfg = ws.config().clone();
    let mut rows = Vec::with_capacity(grid.len());
    for &v in grid {
        let (ratio, alpha, beta) = match param {
            SweepParam::Alpha => (cfg.split_ratio, v, cfg.dpo.beta),
            SweepParam::Beta => (cfg.split_ratio, cfg.noise.alpha, v),
            SweepParam::Split => (v, cfg.noise.alpha, cfg.dpo.beta),
        };
        let mut row = empty_row(ws, param, v, ratio, alpha, beta);
        if let Err(e) = run_cell(ws, &mut row) {
            let mut fresh = empty_row(ws, param, v, ratio, alpha, beta);
            fresh.error = Some(e.to_string());
            row = fresh;
        }
        rows.push(row);
    }
    write_sweep_csv(ws, param, &rows)?;
    Ok(rows)
}

pub fn write_sweep_csv(ws: &Workspace, param: SweepParam, rows: &[SweepRow]) -> Result<(), HarnessError> {
    let mut w = csv::Writer::from_path(ws.path(&format!("reports/sweep_{}.csv", param.name())))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One negative-generation, preference-tuning and evaluation run per alpha,
/// sharing `p_lm` and `p_theta0`.
pub fn alpha_sweep(ws: &mut Workspace, alpha_grid: &[f64]) -> Result<Vec<SweepRow>, HarnessError> {
    if alpha_grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
        return Err(HarnessError::Config("alpha grid must lie in [0, 1]".into()));
    }
    sweep(ws, SweepParam::Alpha, alpha_grid)
}

/// One preference-tuning run per beta on the shared preference dataset.
pub fn beta_sweep(ws: &mut Workspace, beta_grid: &[f64]) -> Result<Vec<SweepRow>, HarnessError> {
    if beta_grid.iter().any(|b| !(*b > 0.0)) {
        return Err(HarnessError::Config("beta grid must be positive".into()));
    }
    sweep(ws, SweepParam::Beta, beta_grid)
}

/// Stage one, negatives, preference tuning and evaluation per D1 ratio.
/// `p_lm` and the full-data baseline do not depend on the ratio and are shared.
pub fn split_ablation(ws: &mut Workspace, ratios: &[f64]) -> Result<Vec<SweepRow>, HarnessError> {
    if ratios.iter().any(|r| !(*r > 0.0 && *r < 1.0)) {
        return Err(HarnessError::Config("split ratios must lie in (0, 1)".into()));
    }
    sweep(ws, SweepParam::Split, ratios)
}

/// Mean oracle score and mean hallucinated-value count of the negatives
/// generated at each alpha on D2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegativeQuality {
    pub alpha: f64,
    pub oracle_score: f64,
    pub hallucinated_values: f64,
}

pub fn negative_quality(ws: &mut Workspace, alphas: &[f64]) -> Result<Vec<NegativeQuality>, HarnessError> {
    let ratio = ws.config().split_ratio;
    let split = ws.split(ratio)?;
    let by_id: BTreeMap<u64, &crate::corpus::Example> = split.d2.iter().map(|e| (e.record.entity_id, e)).collect();
    let mut out = Vec::new();
    for &alpha in alphas {
        let triples = ws.preferences(ratio, alpha)?;
        let (mut s, mut h) = (0.0, 0.0);
        for t in &triples {
            let v = fact_oracle(&t.rejected_tokens, &by_id[&t.rng_stream_id].record, ws.lexicon());
            s += v.score;
            h += v.hallucinated_values as f64;
        }
        let n = triples.len() as f64;
        out.push(NegativeQuality { alpha, oracle_score: s / n, hallucinated_values: h / n });
    }
    let mut w = csv::Writer::from_path(ws.path("reports/negative_quality.csv"))?;
    for r in &out {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(out)
}
