//! Sampling strategies: plain ancestral or greedy decoding, the noisy
//! two-model mixture used to synthesize negatives, and the contrastive (CAD)
//! and entropy-gated PMI baselines.
//!
//! Every strategy is a pure function of its inputs and of
//! `(seed, rng_stream_id)`. Token draws and mixture gate draws come from two
//! independent streams, so a gate that never (or always) fires leaves the
//! token draws untouched.

mod preference;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use preference::{build_preference_dataset, read_preference_jsonl, write_preference_jsonl};

use crate::corpus::{Specials, TokenId};
use crate::model::{ModelError, Parameters, Session, TokenDistribution};
use crate::rng::{derive_seed, stream_rng, unit_f64};

#[derive(Debug, thiserror::Error)]
pub enum DecodeError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid decoding config: {0}")]
    InvalidConfig(String),
    #[error("vocabulary mismatch: {0} vs {1}")]
    VocabMismatch(usize, usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("preference file line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    pub temperature: f64,
    /// Take the argmax instead of sampling.
    pub greedy: bool,
    pub seed: u64,
    pub rng_stream_id: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { max_new_tokens: 40, temperature: 1.0, greedy: false, seed: 0, rng_stream_id: 0 }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if self.max_new_tokens == 0 {
            return Err(DecodeError::InvalidConfig("max_new_tokens must be at least 1".into()));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(DecodeError::InvalidConfig("temperature must be positive".into()));
        }
        Ok(())
    }

    pub fn with_stream(&self, stream: u64) -> Self {
        DecodeConfig { rng_stream_id: stream, ..*self }
    }

    fn token_rng(&self) -> ChaCha8Rng {
        stream_rng(derive_seed(self.seed, "tokens"), self.rng_stream_id)
    }

    fn gate_rng(&self) -> ChaCha8Rng {
        stream_rng(derive_seed(self.seed, "gate"), self.rng_stream_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Probability that a step samples from the unconditional model.
    pub alpha: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig { alpha: 0.5 }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(DecodeError::InvalidConfig(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub cad_alpha: f64,
    pub pmi_lambda: f64,
    /// Entropy threshold in nats above which the PMI penalty applies.
    pub pmi_tau: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { cad_alpha: 0.5, pmi_lambda: 0.5, pmi_tau: 0.5 }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), DecodeError> {
        let ok = |x: f64| x >= 0.0 && x.is_finite();
        if !ok(self.cad_alpha) || !ok(self.pmi_lambda) || !ok(self.pmi_tau) {
            return Err(DecodeError::InvalidConfig("baseline parameters must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// `x - logsumexp(x)`.
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// `(1 - alpha) p_cond + alpha p_lm`.
pub fn mixture_distribution(p_cond: &TokenDistribution, p_lm: &TokenDistribution, alpha: f64) -> TokenDistribution {
    TokenDistribution {
        probs: p_cond.probs.iter().zip(&p_lm.probs).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect(),
    }
}

/// Contrastive scores `(1 + alpha) ln p_theta - alpha ln p_lm`.
pub fn cad_scores(logp_theta: &[f64], logp_lm: &[f64], alpha: f64) -> Vec<f64> {
    logp_theta.iter().zip(logp_lm).map(|(a, b)| (1.0 + alpha) * a - alpha * b).collect()
}

/// PMI scores `ln p_theta - lambda ln p_lm` when the entropy of `p_theta`
/// exceeds `tau`; otherwise `ln p_theta` unchanged.
pub fn pmi_scores(logp_theta: &[f64], logp_lm: &[f64], lambda: f64, tau: f64) -> Vec<f64> {
    let entropy: f64 = -logp_theta.iter().filter(|l| l.is_finite()).map(|&l| l.exp() * l).sum::<f64>();
    if entropy > tau {
        logp_theta.iter().zip(logp_lm).map(|(a, b)| a - lambda * b).collect()
    } else {
        logp_theta.to_vec()
    }
}

/// Inverse-CDF draw.
fn draw(probs: &[f64], rng: &mut ChaCha8Rng) -> TokenId {
    let u = unit_f64(rng);
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i as TokenId;
            }
        }
    }
    last as TokenId
}

/// Picks the next token from unnormalized log scores.
fn pick(mut scores: Vec<f64>, cfg: &DecodeConfig, rng: &mut ChaCha8Rng) -> TokenId {
    if cfg.greedy {
        return TokenDistribution::from_logits(scores).argmax();
    }
    if cfg.temperature != 1.0 {
        for s in scores.iter_mut() {
            *s /= cfg.temperature;
        }
    }
    draw(&TokenDistribution::from_logits(scores).probs, rng)
}

/// A session that has consumed its prefix and holds the next-token logits.
struct Primed<'a> {
    session: Session<'a>,
    logits: Vec<f64>,
}

impl<'a> Primed<'a> {
    fn new(params: &'a Parameters, prefix: &[TokenId]) -> Result<Self, DecodeError> {
        if prefix.is_empty() {
            return Err(ModelError::EmptyPrefix.into());
        }
        let mut session = Session::new(params);
        let mut logits = Vec::new();
        for &t in prefix {
            logits = session.push(t)?;
        }
        Ok(Primed { session, logits })
    }

    fn advance(&mut self, token: TokenId) -> Result<(), DecodeError> {
        self.logits = self.session.push(token)?;
        Ok(())
    }
}

fn check_vocab(a: &Parameters, b: &Parameters) -> Result<(), DecodeError> {
    let (va, vb) = (a.config().vocab_size, b.config().vocab_size);
    if va != vb {
        return Err(DecodeError::VocabMismatch(va, vb));
    }
    Ok(())
}

/// Shared loop over one or two primed models. `choose` gets both sets of
/// logits and returns the token; generation stops after eos or
/// `max_new_tokens`.
fn run<F>(
    mut main: Primed<'_>,
    mut aux: Option<Primed<'_>>,
    cfg: &DecodeConfig,
    mut choose: F,
) -> Result<Vec<TokenId>, DecodeError>
where
    F: FnMut(&[f64], Option<&[f64]>) -> TokenId,
{
    let eos = Specials::fixed().eos;
    let mut out = Vec::new();
    loop {
        let tok = choose(&main.logits, aux.as_ref().map(|a| a.logits.as_slice()));
        out.push(tok);
        if tok == eos || out.len() == cfg.max_new_tokens {
            return Ok(out);
        }
        main.advance(tok)?;
        if let Some(a) = aux.as_mut() {
            a.advance(tok)?;
        }
    }
}

/// Ancestral (or greedy) decoding of a continuation of `context`. The
/// returned tokens end with eos unless `max_new_tokens` was reached first.
pub fn sample_sequence(
    params: &Parameters,
    context: &[TokenId],
    cfg: &DecodeConfig,
) -> Result<Vec<TokenId>, DecodeError> {
    cfg.validate()?;
    let mut rng = cfg.token_rng();
    run(Primed::new(params, context)?, None, cfg, |logits, _| pick(logits.to_vec(), cfg, &mut rng))
}

/// Noisy two-model generation.
///
/// Each step first draws a gate `a_t ~ Bernoulli(alpha)`; the token then
/// comes from `p_theta0(. | context, y<t)` when the gate is 0 and from
/// `p_lm(. | bos, y<t)` when it is 1. Both models see the same realized
/// prefix, and eos from either model ends the sequence.
pub fn noisy_generation(
    context: &[TokenId],
    p_lm: &Parameters,
    p_theta0: &Parameters,
    noise: &NoiseConfig,
    cfg: &DecodeConfig,
) -> Result<Vec<TokenId>, DecodeError> {
    cfg.validate()?;
    noise.validate()?;
    check_vocab(p_lm, p_theta0)?;
    let mut tokens = cfg.token_rng();
    let mut gate = cfg.gate_rng();
    let lm = Primed::new(p_lm, &[Specials::fixed().bos])?;
    let cond = Primed::new(p_theta0, context)?;
    run(cond, Some(lm), cfg, |cond_logits, lm_logits| {
        let use_lm = unit_f64(&mut gate) < noise.alpha;
        let logits = if use_lm { lm_logits.unwrap() } else { cond_logits };
        pick(logits.to_vec(), cfg, &mut tokens)
    })
}

/// Contrastive decoding against the unconditional model.
pub fn cad_decode(
    context: &[TokenId],
    p_theta: &Parameters,
    p_lm: &Parameters,
    baseline: &BaselineConfig,
    cfg: &DecodeConfig,
) -> Result<Vec<TokenId>, DecodeError> {
    cfg.validate()?;
    baseline.validate()?;
    check_vocab(p_theta, p_lm)?;
    if baseline.cad_alpha == 0.0 {
        return sample_sequence(p_theta, context, cfg);
    }
    let mut rng = cfg.token_rng();
    let lm = Primed::new(p_lm, &[Specials::fixed().bos])?;
    run(Primed::new(p_theta, context)?, Some(lm), cfg, |lt, ll| {
        let s = cad_scores(&log_softmax(lt), &log_softmax(ll.unwrap()), baseline.cad_alpha);
        pick(s, cfg, &mut rng)
    })
}

/// Entropy-gated PMI decoding.
pub fn pmi_decode(
    context: &[TokenId],
    p_theta: &Parameters,
    p_lm: &Parameters,
    baseline: &BaselineConfig,
    cfg: &DecodeConfig,
) -> Result<Vec<TokenId>, DecodeError> {
    cfg.validate()?;
    baseline.validate()?;
    check_vocab(p_theta, p_lm)?;
    if baseline.pmi_lambda == 0.0 {
        return sample_sequence(p_theta, context, cfg);
    }
    let mut rng = cfg.token_rng();
    let lm = Primed::new(p_lm, &[Specials::fixed().bos])?;
    run(Primed::new(p_theta, context)?, Some(lm), cfg, |lt, ll| {
        let s = pmi_scores(&log_softmax(lt), &log_softmax(ll.unwrap()), baseline.pmi_lambda, baseline.pmi_tau);
        pick(s, cfg, &mut rng)
    })
}
