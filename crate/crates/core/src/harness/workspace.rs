//! Stage runner over an output directory.
//!
//! ```text
//! <out>/manifest.json      artifact path -> fingerprint of the config that produced it
//! <out>/checkpoints/       p_lm, sft_full, p_theta0_r*, scope_r*_a*_b*
//! <out>/datasets/          corpus.jsonl, preferences_r*_a*.jsonl
//! <out>/traces/            one CSV per training run
//! <out>/reports/           eval_report.{json,csv}, outputs.jsonl, sweep_*.csv
//! ```
//!
//! Every stage first looks for its artifact; it is reused only when the
//! manifest records the fingerprint the current config would produce.
//! Otherwise the stage recomputes it from upstream artifacts.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use super::report::{emit_report, evaluate_outputs, EvalReport};
use super::{HarnessError, PipelineConfig};
use crate::corpus::{
    generate_corpus, split_dataset, write_corpus_jsonl, Example, Lexicon, Specials, SplitDataset, TokenId,
};
use crate::decoding::{
    build_preference_dataset, cad_decode, noisy_generation, pmi_decode, read_preference_jsonl, sample_sequence,
    write_preference_jsonl, DecodeConfig, NoiseConfig,
};
use crate::metrics::fact_oracle;
use crate::model::{init_params, load_checkpoint_for, save_checkpoint, Parameters, Role};
use crate::rng::derive_seed;
use crate::training::{pretrain_lm, train_dpo_selected, train_sft, PreferenceTriple, TrainError, TrainingTrace};

/// Systems compared in the main report. `sft_full` is the reference.
pub const SYSTEMS: [&str; 5] = ["sft_full", "sft_d1", "scope", "cad", "pmi"];
pub const REFERENCE_SYSTEM: &str = "sft_full";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    Plain,
    Cad,
    Pmi,
    Noisy,
}

impl Strategy {
    pub fn name(self) -> &'static str {
        match self {
            Strategy::Plain => "plain",
            Strategy::Cad => "cad",
            Strategy::Pmi => "pmi",
            Strategy::Noisy => "noisy",
        }
    }
}

fn fingerprint(value: &serde_json::Value) -> String {
    format!("{:016x}", derive_seed(0, &value.to_string()))
}

fn fmt_ratio(x: f64) -> String {
    format!("{x:.2}")
}

/// Outcome of one preference-tuning stage.
#[derive(Debug, Clone)]
pub struct ScopeRun {
    pub params: Parameters,
    pub trace: TrainingTrace,
}

pub struct Workspace {
    cfg: PipelineConfig,
    lexicon: Lexicon,
    dir: PathBuf,
    manifest: BTreeMap<String, String>,
}

impl Workspace {
    /// Opens (or creates) the output directory named in the config.
    pub fn open(cfg: PipelineConfig) -> Result<Self, HarnessError> {
        cfg.validate()?;
        let dir = cfg.out_dir.clone();
        for sub in ["checkpoints", "datasets", "traces", "reports"] {
            std::fs::create_dir_all(dir.join(sub))?;
        }
        let manifest = match std::fs::read_to_string(dir.join("manifest.json")) {
            Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
            Err(_) => BTreeMap::new(),
        };
        let lexicon = cfg.lexicon()?;
        Ok(Workspace { cfg, lexicon, dir, manifest })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn is_current(&self, rel: &str, fp: &str) -> bool {
        self.manifest.get(rel).map(String::as_str) == Some(fp) && self.path(rel).exists()
    }

    fn record(&mut self, rel: &str, fp: &str) -> Result<(), HarnessError> {
        self.manifest.insert(rel.to_string(), fp.to_string());
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        std::fs::write(self.path("manifest.json"), text + "\n")?;
        Ok(())
    }

    fn model_config(&self) -> crate::model::ModelConfig {
        self.cfg.model.config(self.lexicon.vocab_size(), self.cfg.stage_seed("init"))
    }

    fn save_trace(&self, rel: &str, trace: &TrainingTrace) -> Result<(), HarnessError> {
        trace.save_csv(self.path(rel)).map_err(Into::into)
    }

    /// Persists the partial trace of a diverged run next to where the full one would go.
    fn keep_partial<T>(&self, rel: &str, r: Result<T, TrainError>) -> Result<T, HarnessError> {
        if let Err(TrainError::Diverged { trace, .. }) = &r {
            let _ = self.save_trace(&rel.replace(".csv", ".partial.csv"), trace);
        }
        r.map_err(Into::into)
    }

    fn corpus_fp(&self) -> String {
        fingerprint(&json!([
            "corpus",
            self.cfg.corpus,
            self.cfg.heldout_count,
            self.cfg.stage_seed("corpus"),
            self.cfg.stage_seed("split")
        ]))
    }

    fn generate_split(&self, ratio: f64) -> Result<SplitDataset, HarnessError> {
        let corpus = crate::corpus::CorpusConfig { seed: self.cfg.stage_seed("corpus"), ..self.cfg.corpus.clone() };
        let examples = generate_corpus(&corpus)?;
        Ok(split_dataset(&examples, ratio, self.cfg.heldout_count, self.cfg.stage_seed("split"))?)
    }

    /// Generated corpus split at the configured ratio; persisted as JSON lines.
    pub fn corpus(&mut self) -> Result<SplitDataset, HarnessError> {
        self.split(self.cfg.split_ratio)
    }

    /// The corpus split at `ratio`. Held-out and train membership do not
    /// depend on the ratio; only the D1/D2 boundary moves.
    pub fn split(&mut self, ratio: f64) -> Result<SplitDataset, HarnessError> {
        let split = self.generate_split(ratio).map_err(|e| e.in_stage("gen-corpus"))?;
        if ratio == self.cfg.split_ratio {
            let rel = "datasets/corpus.jsonl";
            let fp = fingerprint(&json!([self.corpus_fp(), ratio]));
            if !self.is_current(rel, &fp) {
                write_corpus_jsonl(&split, self.path(rel)).map_err(|e| HarnessError::from(e).in_stage("gen-corpus"))?;
                self.record(rel, &fp)?;
            }
        }
        Ok(split)
    }

    /// Train examples (D1 and D2) in entity order, so that full-data stages
    /// do not depend on the split ratio.
    fn train_examples(&mut self) -> Result<Vec<Example>, HarnessError> {
        let mut train = self.corpus()?.train();
        train.sort_by_key(|e| e.record.entity_id);
        Ok(train)
    }

    fn lm_fp(&self) -> String {
        fingerprint(&json!([
            "p_lm",
            self.corpus_fp(),
            self.cfg.model,
            self.cfg.pretrain,
            self.cfg.stage_seed("pretrain")
        ]))
    }

    fn load_params(&self, rel: &str) -> Result<Parameters, HarnessError> {
        Ok(load_checkpoint_for(self.path(rel), &self.model_config())?.params)
    }

    /// Unconditional model trained on `<bos> target` for every train target.
    pub fn p_lm(&mut self) -> Result<Parameters, HarnessError> {
        let rel = "checkpoints/p_lm.ckpt";
        let fp = self.lm_fp();
        if self.is_current(rel, &fp) {
            return self.load_params(rel);
        }
        let train = self.train_examples()?;
        let run = || -> Result<Parameters, HarnessError> {
            let targets: Vec<Vec<TokenId>> = train.into_iter().map(|e| e.target_tokens).collect();
            let init = init_params(&self.model_config())?;
            let tc =
                crate::training::TrainConfig { seed: self.cfg.stage_seed("pretrain"), ..self.cfg.pretrain.clone() };
            let (p, trace) =
                self.keep_partial("traces/pretrain.csv", pretrain_lm(&init, &targets, Specials::fixed().bos, &tc))?;
            self.save_trace("traces/pretrain.csv", &trace)?;
            save_checkpoint(&p, Role::Pretrained, self.path(rel))?;
            Ok(p)
        };
        let p = run().map_err(|e| e.in_stage("pretrain"))?;
        self.record(rel, &fp)?;
        Ok(p)
    }

    fn sft_fp(&self, which: &str) -> String {
        fingerprint(&json!([which, self.lm_fp(), self.cfg.sft, self.cfg.stage_seed(which)]))
    }

    fn run_sft(
        &mut self,
        rel: &str,
        trace_rel: &str,
        stage: &str,
        data: Vec<Example>,
        fp: String,
    ) -> Result<Parameters, HarnessError> {
        if self.is_current(rel, &fp) {
            return self.load_params(rel);
        }
        let p_lm = self.p_lm()?;
        let run = || -> Result<Parameters, HarnessError> {
            let tc = crate::training::TrainConfig { seed: self.cfg.stage_seed(stage), ..self.cfg.sft.clone() };
            let (p, trace) = self.keep_partial(trace_rel, train_sft(&p_lm, &data, &tc))?;
            self.save_trace(trace_rel, &trace)?;
            save_checkpoint(&p, Role::Sft, self.path(rel))?;
            Ok(p)
        };
        let p = run().map_err(|e| e.in_stage("sft"))?;
        self.record(rel, &fp)?;
        Ok(p)
    }

    /// Supervised baseline on all of D, initialized from `p_lm`.
    pub fn sft_full(&mut self) -> Result<Parameters, HarnessError> {
        let data = self.train_examples()?;
        let fp = self.sft_fp("sft_full");
        self.run_sft("checkpoints/sft_full.ckpt", "traces/sft_full.csv", "sft_full", data, fp)
    }

    /// Stage-one model `p_theta0`: supervised fine-tuning of `p_lm` on D1.
    pub fn p_theta0(&mut self, ratio: f64) -> Result<Parameters, HarnessError> {
        let data = self.split(ratio)?.d1;
        let r = fmt_ratio(ratio);
        let fp = fingerprint(&json!([self.sft_fp("sft_d1"), r]));
        self.run_sft(&format!("checkpoints/p_theta0_r{r}.ckpt"), &format!("traces/sft_d1_r{r}.csv"), "sft_d1", data, fp)
    }

    fn prefs_fp(&self, ratio: f64, alpha: f64) -> String {
        fingerprint(&json!([
            "prefs",
            self.sft_fp("sft_d1"),
            fmt_ratio(ratio),
            alpha,
            self.cfg.negative_decode,
            self.cfg.stage_seed("negatives")
        ]))
    }

    fn negative_decode(&self) -> DecodeConfig {
        DecodeConfig { seed: self.cfg.stage_seed("negatives"), ..self.cfg.negative_decode }
    }

    /// Preference triples over D2 with negatives from noisy generation.
    pub fn preferences(&mut self, ratio: f64, alpha: f64) -> Result<Vec<PreferenceTriple>, HarnessError> {
        let rel = format!("datasets/preferences_r{}_a{alpha:.2}.jsonl", fmt_ratio(ratio));
        let fp = self.prefs_fp(ratio, alpha);
        if self.is_current(&rel, &fp) {
            return Ok(read_preference_jsonl(self.path(&rel))?);
        }
        let d2 = self.split(ratio)?.d2;
        let p_lm = self.p_lm()?;
        let p0 = self.p_theta0(ratio)?;
        let run = || -> Result<Vec<PreferenceTriple>, HarnessError> {
            let triples = build_preference_dataset(&d2, &p_lm, &p0, &NoiseConfig { alpha }, &self.negative_decode())?;
            write_preference_jsonl(&triples, self.path(&rel))?;
            Ok(triples)
        };
        let t = run().map_err(|e| e.in_stage("gen-negatives"))?;
        self.record(&rel, &fp)?;
        Ok(t)
    }

    fn eval_decode(&self) -> DecodeConfig {
        DecodeConfig { seed: self.cfg.stage_seed("eval"), ..self.cfg.eval_decode }
    }

    /// Mean oracle score of greedy outputs of `params` over `examples`.
    pub fn mean_oracle_score(&self, params: &Parameters, examples: &[Example]) -> Result<f64, HarnessError> {
        let outs = self.decode_plain(params, examples)?;
        let total: f64 = outs.iter().zip(examples).map(|(o, e)| fact_oracle(o, &e.record, &self.lexicon).score).sum();
        Ok(total / examples.len().max(1) as f64)
    }

    /// Preference tuning from `p_theta0` on the triples for `(ratio, alpha)`.
    pub fn scope(&mut self, ratio: f64, alpha: f64, beta: f64) -> Result<ScopeRun, HarnessError> {
        let tag = format!("r{}_a{alpha:.2}_b{beta}", fmt_ratio(ratio));
        let rel = format!("checkpoints/scope_{tag}.ckpt");
        let trace_rel = format!("traces/dpo_{tag}.csv");
        let fp = fingerprint(&json!([
            "scope",
            self.prefs_fp(ratio, alpha),
            self.cfg.dpo,
            beta,
            self.cfg.validation_size,
            self.cfg.eval_decode,
            self.cfg.stage_seed("dpo")
        ]));
        if self.is_current(&rel, &fp) && self.path(&trace_rel).exists() {
            return Ok(ScopeRun {
                params: self.load_params(&rel)?,
                trace: TrainingTrace::load_csv(self.path(&trace_rel))?,
            });
        }
        let triples = self.preferences(ratio, alpha)?;
        let p0 = self.p_theta0(ratio)?;
        let split = self.split(ratio)?;
        let validation: Vec<Example> = split.d1.iter().take(self.cfg.validation_size).cloned().collect();
        let run = || -> Result<ScopeRun, HarnessError> {
            let tc = crate::training::TrainConfig { seed: self.cfg.stage_seed("dpo"), beta, ..self.cfg.dpo.clone() };
            let mut select = |_epoch: usize, p: &Parameters| -> Result<f64, TrainError> {
                self.mean_oracle_score(p, &validation).map_err(|e| TrainError::InvalidConfig(e.to_string()))
            };
            let selector = if validation.is_empty() {
                None
            } else {
                Some(&mut select as &mut dyn FnMut(usize, &Parameters) -> Result<f64, TrainError>)
            };
            let out = self.keep_partial(&trace_rel, train_dpo_selected(&p0, &triples, &tc, selector))?;
            self.save_trace(&trace_rel, &out.trace)?;
            save_checkpoint(&out.params, Role::Scope, self.path(&rel))?;
            Ok(ScopeRun { params: out.params, trace: out.trace })
        };
        let r = run().map_err(|e| e.in_stage("dpo"))?;
        self.record(&rel, &fp)?;
        Ok(r)
    }

    fn decode_with<F>(&self, examples: &[Example], f: F) -> Result<Vec<Vec<TokenId>>, HarnessError>
    where
        F: Fn(&Example, &DecodeConfig) -> Result<Vec<TokenId>, crate::decoding::DecodeError> + Sync,
    {
        let cfg = self.eval_decode();
        examples.par_iter().map(|e| f(e, &cfg.with_stream(e.record.entity_id)).map_err(HarnessError::from)).collect()
    }

    pub fn decode_plain(&self, params: &Parameters, examples: &[Example]) -> Result<Vec<Vec<TokenId>>, HarnessError> {
        self.decode_with(examples, |e, c| sample_sequence(params, &e.context_tokens, c))
    }

    pub fn decode_cad(
        &self,
        p_theta: &Parameters,
        p_lm: &Parameters,
        examples: &[Example],
    ) -> Result<Vec<Vec<TokenId>>, HarnessError> {
        let b = self.cfg.baseline;
        self.decode_with(examples, |e, c| cad_decode(&e.context_tokens, p_theta, p_lm, &b, c))
    }

    pub fn decode_pmi(
        &self,
        p_theta: &Parameters,
        p_lm: &Parameters,
        examples: &[Example],
    ) -> Result<Vec<Vec<TokenId>>, HarnessError> {
        let b = self.cfg.baseline;
        self.decode_with(examples, |e, c| pmi_decode(&e.context_tokens, p_theta, p_lm, &b, c))
    }

    /// Decodes the held-out set with one strategy and writes
    /// `reports/decode_<strategy>.jsonl`. Plain decoding uses the tuned model;
    /// the contrastive baselines use `sft_full`; noisy generation samples from
    /// the `p_theta0`/`p_lm` mixture with the negative-sampling settings.
    pub fn decode_heldout(&mut self, strategy: Strategy) -> Result<Vec<Vec<TokenId>>, HarnessError> {
        let (ratio, alpha, beta) = (self.cfg.split_ratio, self.cfg.noise.alpha, self.cfg.dpo.beta);
        let heldout = self.corpus()?.heldout;
        let outs = match strategy {
            Strategy::Plain => {
                let p = self.scope(ratio, alpha, beta)?.params;
                self.decode_plain(&p, &heldout)
            }
            Strategy::Cad | Strategy::Pmi => {
                let (p_lm, sft_full) = (self.p_lm()?, self.sft_full()?);
                if strategy == Strategy::Cad {
                    self.decode_cad(&sft_full, &p_lm, &heldout)
                } else {
                    self.decode_pmi(&sft_full, &p_lm, &heldout)
                }
            }
            Strategy::Noisy => {
                let (p_lm, p0) = (self.p_lm()?, self.p_theta0(ratio)?);
                let cfg = self.negative_decode();
                let noise = NoiseConfig { alpha };
                heldout
                    .par_iter()
                    .map(|e| {
                        Ok(noisy_generation(
                            &e.context_tokens,
                            &p_lm,
                            &p0,
                            &noise,
                            &cfg.with_stream(e.record.entity_id),
                        )?)
                    })
                    .collect()
            }
        }
        .map_err(|e| e.in_stage("decode"))?;
        let mut named = BTreeMap::new();
        named.insert(strategy.name().to_string(), outs);
        write_outputs(
            &self.path(&format!("reports/decode_{}.jsonl", strategy.name())),
            &self.lexicon,
            &heldout,
            &named,
        )?;
        Ok(named.into_values().next().unwrap())
    }

    /// Trains whatever is missing and decodes the held-out set with every system.
    pub fn system_outputs(&mut self) -> Result<(Vec<Example>, BTreeMap<String, Vec<Vec<TokenId>>>), HarnessError> {
        let (ratio, alpha, beta) = (self.cfg.split_ratio, self.cfg.noise.alpha, self.cfg.dpo.beta);
        let heldout = self.corpus()?.heldout;
        let p_lm = self.p_lm()?;
        let sft_full = self.sft_full()?;
        let p0 = self.p_theta0(ratio)?;
        let scope = self.scope(ratio, alpha, beta)?.params;
        let run = || -> Result<BTreeMap<String, Vec<Vec<TokenId>>>, HarnessError> {
            let mut outs = BTreeMap::new();
            outs.insert("sft_full".to_string(), self.decode_plain(&sft_full, &heldout)?);
            outs.insert("sft_d1".to_string(), self.decode_plain(&p0, &heldout)?);
            outs.insert("scope".to_string(), self.decode_plain(&scope, &heldout)?);
            outs.insert("cad".to_string(), self.decode_cad(&sft_full, &p_lm, &heldout)?);
            outs.insert("pmi".to_string(), self.decode_pmi(&sft_full, &p_lm, &heldout)?);
            Ok(outs)
        };
        let outs = run().map_err(|e| e.in_stage("decode"))?;
        Ok((heldout, outs))
    }

    /// Full evaluation; writes the report files and the decoded outputs.
    pub fn evaluate(&mut self) -> Result<EvalReport, HarnessError> {
        let (heldout, outs) = self.system_outputs()?;
        let run = || -> Result<EvalReport, HarnessError> {
            let report = evaluate_outputs(&self.lexicon, &heldout, &outs, REFERENCE_SYSTEM)?;
            emit_report(&report, self.path("reports"))?;
            write_outputs(&self.path("reports/outputs.jsonl"), &self.lexicon, &heldout, &outs)?;
            Ok(report)
        };
        run().map_err(|e| e.in_stage("eval"))
    }
}

#[derive(Serialize)]
struct OutputLine<'a> {
    entity_id: u64,
    system: &'a str,
    tokens: &'a [TokenId],
    text: String,
}

fn write_outputs(
    path: &Path,
    lexicon: &Lexicon,
    examples: &[Example],
    outs: &BTreeMap<String, Vec<Vec<TokenId>>>,
) -> Result<(), HarnessError> {
    let mut text = String::new();
    for (name, o) in outs {
        for (tokens, e) in o.iter().zip(examples) {
            let line = OutputLine { entity_id: e.record.entity_id, system: name, tokens, text: lexicon.decode(tokens) };
            text.push_str(&serde_json::to_string(&line).expect("output serializes"));
            text.push('\n');
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}
