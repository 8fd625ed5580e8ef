//! Acceptance suite. Each test prints one `criterion N: PASS|FAIL` line
//! before asserting. The end-to-end criteria share one reference run and one
//! alpha sweep built lazily on first use.

use std::path::PathBuf;
use std::sync::OnceLock;

use rand::Rng;
use scope_lab::corpus::{
    AttributeSpec, ClauseTemplate, CorpusConfig, Example, Fact, Lexicon, Record, Specials, TemplateSet, TokenId,
    VocabSpec,
};
use scope_lab::decoding::{
    cad_decode, mixture_distribution, noisy_generation, pmi_decode, sample_sequence, BaselineConfig, DecodeConfig,
    NoiseConfig,
};
use scope_lab::harness::{
    alpha_sweep, negative_quality, run_scope_pipeline, NegativeQuality, PipelineArtifacts, PipelineConfig, RegimeLabel,
    SweepRow, Workspace,
};
use scope_lab::metrics::{
    bleu, fact_oracle, mcnemar_test, paired_t_test, pairwise_judge, parent_recall, rouge_l, JudgeResult,
};
use scope_lab::model::{init_params, next_token_distribution, sequence_log_prob_and_grad, ModelConfig, Parameters};
use scope_lab::rng::stream_rng;
use scope_lab::training::{dpo_loss_and_grad, mle_loss_and_grad, train_dpo, PreferenceTriple, TrainConfig};

fn verdict(n: u32, name: &str, ok: bool, detail: &str) {
    println!("criterion {n:>2}: {} {name} ({detail})", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "criterion {n} failed: {name}: {detail}");
}

fn random_model(vocab: usize, layers: usize, seed: u64, scale: f64) -> Parameters {
    let cfg =
        ModelConfig { vocab_size: vocab, d_model: 16, n_layers: layers, n_heads: 2, d_ff: 32, max_seq_len: 24, seed };
    let mut p = init_params(&cfg).unwrap();
    for v in p.as_mut_slice() {
        *v *= scale;
    }
    p
}

fn random_tokens(rng: &mut impl Rng, vocab: u32, len: usize) -> Vec<TokenId> {
    // Skip the reserved ids so sequences never contain eos or bos by accident.
    (0..len).map(|_| rng.random_range(7..vocab)).collect()
}

/// Worst relative error between `grad` and central differences on 25
/// coordinates where either side is non-negligible.
fn finite_difference_error(params: &Parameters, grad: &[f64], loss: impl Fn(&Parameters) -> f64, seed: u64) -> f64 {
    let mut rng = stream_rng(seed, 1);
    let h = 1e-5;
    let (mut worst, mut checked) = (0.0f64, 0);
    while checked < 25 {
        let i = rng.random_range(0..params.len());
        let mut p = params.clone();
        p.as_mut_slice()[i] += h;
        let up = loss(&p);
        p.as_mut_slice()[i] -= 2.0 * h;
        let fd = (up - loss(&p)) / (2.0 * h);
        if fd.abs() < 1e-7 && grad[i].abs() < 1e-7 {
            continue;
        }
        worst = worst.max((fd - grad[i]).abs() / fd.abs().max(grad[i].abs()));
        checked += 1;
    }
    worst
}

fn example(context: Vec<TokenId>, target: Vec<TokenId>) -> Example {
    Example { record: Record { entity_id: 0, facts: vec![] }, context_tokens: context, target_tokens: target }
}

#[test]
fn criterion_01_gradient_correctness() {
    let mut rng = stream_rng(101, 0);
    let p = random_model(20, 2, 5, 8.0);
    let eos = Specials::fixed().eos;
    let batch: Vec<Example> = (0..3)
        .map(|_| {
            let mut t = random_tokens(&mut rng, 20, 4);
            t.push(eos);
            example(random_tokens(&mut rng, 20, 5), t)
        })
        .collect();
    let (_, g) = mle_loss_and_grad(&p, &batch).unwrap();
    let mle_err = finite_difference_error(&p, &g, |q| mle_loss_and_grad(q, &batch).unwrap().0, 1);

    let reference = p.clone();
    let mut policy = p.clone();
    for v in policy.as_mut_slice() {
        *v += 0.05 * (rng.random::<f64>() - 0.5);
    }
    let triples: Vec<PreferenceTriple> = (0..3)
        .map(|i| {
            let (mut a, mut b) = (random_tokens(&mut rng, 20, 4), random_tokens(&mut rng, 20, 6));
            a.push(eos);
            b.push(eos);
            PreferenceTriple::new(random_tokens(&mut rng, 20, 5), a, b, 0.5, i)
        })
        .collect();
    let (_, g) = dpo_loss_and_grad(&policy, &reference, &triples, 0.5).unwrap();
    let dpo_err =
        finite_difference_error(&policy, &g, |q| dpo_loss_and_grad(q, &reference, &triples, 0.5).unwrap().0, 2);
    verdict(
        1,
        "gradient correctness",
        mle_err < 1e-4 && dpo_err < 1e-4,
        &format!("max relative error mle {mle_err:.2e}, dpo {dpo_err:.2e}"),
    );
}

#[test]
fn criterion_02_dpo_identity() {
    let mut rng = stream_rng(102, 0);
    let p = random_model(20, 2, 9, 8.0);
    let eos = Specials::fixed().eos;
    let triples: Vec<PreferenceTriple> = (0..4)
        .map(|i| {
            let (mut a, mut b) = (random_tokens(&mut rng, 20, 3), random_tokens(&mut rng, 20, 5));
            a.push(eos);
            b.push(eos);
            PreferenceTriple::new(random_tokens(&mut rng, 20, 4), a, b, 0.5, i)
        })
        .collect();
    let beta = 0.3;
    let (loss, grad) = dpo_loss_and_grad(&p, &p, &triples, beta).unwrap();
    let loss_ok = (loss - std::f64::consts::LN_2).abs() <= 1e-12;

    // With the reference detached, the gradient at policy = reference is the
    // policy side alone: -(beta / 2n) * sum(grad log p(y+) - grad log p(y-)).
    // If the reference received gradient through the shared point, the two
    // sides would cancel and the total would vanish instead.
    let mut expected = vec![0.0; p.len()];
    let coef = -beta * 0.5 / triples.len() as f64;
    for t in &triples {
        sequence_log_prob_and_grad(&p, &t.context_tokens, &t.preferred_tokens, coef, &mut expected).unwrap();
        sequence_log_prob_and_grad(&p, &t.context_tokens, &t.rejected_tokens, -coef, &mut expected).unwrap();
    }
    let scale = expected.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let dev = grad.iter().zip(&expected).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));

    let before = p.clone();
    let cfg = TrainConfig { learning_rate: 1e-2, batch_size: 2, epochs: 2, beta, ..Default::default() };
    let (trained, _) = train_dpo(&p, &triples, &cfg).unwrap();
    let reference_untouched = before.as_slice() == p.as_slice() && trained.as_slice() != p.as_slice();
    verdict(
        2,
        "DPO identity",
        loss_ok && scale > 0.0 && dev <= 1e-12 * scale.max(1.0) && reference_untouched,
        &format!("loss - ln2 = {:.1e}, policy-only gradient deviation {dev:.1e}", loss - std::f64::consts::LN_2),
    );
}

#[test]
fn criterion_03_decoder_equivalences() {
    let mut rng = stream_rng(103, 0);
    let bos = Specials::fixed().bos;
    let (p_lm, p0) = (random_model(24, 1, 11, 20.0), random_model(24, 1, 12, 20.0));
    let mut mismatches = 0;
    for s in 0..100 {
        let ctx = random_tokens(&mut rng, 24, 1 + s as usize % 6);
        let cfg = DecodeConfig { max_new_tokens: 12, seed: 31, rng_stream_id: s, ..Default::default() };
        let plain = sample_sequence(&p0, &ctx, &cfg).unwrap();
        let same = [
            noisy_generation(&ctx, &p_lm, &p0, &NoiseConfig { alpha: 0.0 }, &cfg).unwrap(),
            cad_decode(&ctx, &p0, &p_lm, &BaselineConfig { cad_alpha: 0.0, ..Default::default() }, &cfg).unwrap(),
            pmi_decode(&ctx, &p0, &p_lm, &BaselineConfig { pmi_lambda: 0.0, ..Default::default() }, &cfg).unwrap(),
        ];
        mismatches += same.iter().filter(|o| **o != plain).count();
        let lm = sample_sequence(&p_lm, &[bos], &cfg).unwrap();
        if noisy_generation(&ctx, &p_lm, &p0, &NoiseConfig { alpha: 1.0 }, &cfg).unwrap() != lm {
            mismatches += 1;
        }
    }
    verdict(3, "decoder equivalences", mismatches == 0, &format!("{mismatches} mismatches over 100 contexts"));
}

#[test]
fn criterion_04_mixture_law() {
    let mut rng = stream_rng(104, 0);
    let bos = Specials::fixed().bos;
    let vocab = 12;
    let n = 100_000u64;
    let (mut worst, mut at) = (0.0f64, String::new());
    for pair in 0..10u64 {
        let p_lm = random_model(vocab, 1, 40 + pair, 25.0);
        let p0 = random_model(vocab, 1, 60 + pair, 25.0);
        let ctx = random_tokens(&mut rng, vocab as u32, 3);
        let exact = mixture_distribution(
            &next_token_distribution(&p0, &ctx).unwrap(),
            &next_token_distribution(&p_lm, &[bos]).unwrap(),
            0.5,
        );
        let mut counts = vec![0u64; vocab];
        for s in 0..n {
            let cfg = DecodeConfig { max_new_tokens: 1, seed: 1000 + pair, rng_stream_id: s, ..Default::default() };
            let out = noisy_generation(&ctx, &p_lm, &p0, &NoiseConfig { alpha: 0.5 }, &cfg).unwrap();
            counts[out[0] as usize] += 1;
        }
        for (k, &c) in counts.iter().enumerate() {
            let p = exact.probs[k];
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let dev = (c as f64 - n as f64 * p).abs();
            // A zero-probability token must never be drawn.
            let z = if sigma > 0.0 {
                dev / sigma
            } else if c == 0 {
                0.0
            } else {
                f64::INFINITY
            };
            if z > worst {
                worst = z;
                at = format!("pair {pair} token {k}: {c} draws, expected {:.1}", n as f64 * p);
            }
        }
    }
    verdict(4, "mixture law", worst <= 4.0, &format!("largest deviation {worst:.2} sigma at {at}"));
}

fn loft_lexicon() -> (Lexicon, Record) {
    let vocab = VocabSpec {
        attributes: vec![
            AttributeSpec { name: "colour".into(), values: vec!["dark blue".into(), "red".into()], required: false },
            AttributeSpec { name: "room".into(), values: vec!["loft".into(), "cellar".into()], required: false },
        ],
        function_words: vec!["the".into(), "is".into(), "and".into(), ".".into()],
    };
    let templates = TemplateSet {
        heads: vec![],
        clauses: vec![
            ClauseTemplate { attribute: "colour".into(), pattern: "is {colour}".into() },
            ClauseTemplate { attribute: "room".into(), pattern: "the {room}".into() },
        ],
        conjunction: "and".into(),
        terminator: ".".into(),
    };
    let lex = Lexicon::new(&vocab, &templates).unwrap();
    let fact = |a: &str, v: &str| Fact {
        attribute: lex.attribute(a).unwrap(),
        value: lex.value(a, v).unwrap(),
        highlighted: false,
    };
    let r = Record { entity_id: 0, facts: vec![fact("colour", "dark blue"), fact("room", "loft")] };
    (lex, r)
}

/// Two-sided normal tail by Simpson quadrature of the density.
fn normal_two_sided(z: f64) -> f64 {
    let pdf = |x: f64| (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let n = 20_000;
    let h = z / n as f64;
    let mut s = pdf(0.0) + pdf(z);
    for i in 1..n {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * h / 3.0
}

/// Two-sided Student t tail by Simpson quadrature of the density.
fn t_two_sided(t: f64, dof: f64) -> f64 {
    let ln_norm = statrs::function::gamma::ln_gamma((dof + 1.0) / 2.0)
        - statrs::function::gamma::ln_gamma(dof / 2.0)
        - 0.5 * (dof * std::f64::consts::PI).ln();
    let pdf = |x: f64| (ln_norm - (dof + 1.0) / 2.0 * (1.0 + x * x / dof).ln()).exp();
    let n = 20_000;
    let h = t / n as f64;
    let mut s = pdf(0.0) + pdf(t);
    for i in 1..n {
        s += pdf(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * s * h / 3.0
}

#[test]
fn criterion_05_metric_oracles() {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let w = |s: &'static str| s.split_whitespace().collect::<Vec<_>>();
    let mut failures: Vec<&str> = Vec::new();
    let mut check = |ok: bool, what: &'static str| {
        if !ok {
            failures.push(what);
        }
    };

    // BLEU
    let c = vec![w("a b c d e"), w("f g h")];
    check(close(bleu(&c, &c, 4).unwrap(), 100.0), "bleu identity");
    check(bleu(&c, &[w("u v w x y"), w("p q r")], 4).unwrap() == 0.0, "bleu disjoint");
    let by_hand = 100.0 * ((0.75f64.ln() + (2.0f64 / 3.0).ln() + 0.5f64.ln() - 9.0) / 4.0).exp();
    check(close(bleu(&[w("a b c d")], &[w("a b c e")], 4).unwrap(), by_hand), "bleu a b c d");

    // ROUGE-L
    check(rouge_l(&w("a b c"), &w("a b c")).unwrap() == 1.0, "rouge identity");
    check(rouge_l(&w("a b"), &w("c d")).unwrap() == 0.0, "rouge disjoint");
    check(close(rouge_l(&w("a b c d"), &w("a c d")).unwrap(), 6.0 / 7.0), "rouge lcs");

    // PARENT
    let (lex, r) = loft_lexicon();
    check(parent_recall(&lex.encode("dark blue loft").unwrap(), &r, &lex, 4) == 1.0, "parent full");
    check(parent_recall(&[], &r, &lex, 4) == 0.0, "parent empty");
    check(close(parent_recall(&lex.encode("the loft is dark").unwrap(), &r, &lex, 4), 1.0 / 3.0), "parent loft");

    // Fact oracle and judge on the reference vocabulary.
    let lex = CorpusConfig::reference().lexicon().unwrap();
    let fact = |a: &str, v: &str| Fact {
        attribute: lex.attribute(a).unwrap(),
        value: lex.value(a, v).unwrap(),
        highlighted: false,
    };
    let r = Record {
        entity_id: 1,
        facts: vec![fact("name", "Vaults"), fact("type", "pub"), fact("area", "city centre"), fact("near", "Raja")],
    };
    let gold = lex.encode("Vaults is a pub in the city centre and near Raja .").unwrap();
    check(fact_oracle(&gold, &r, &lex).score == 1.0, "oracle gold");
    let foreign = lex.encode("Vaults is a pub in the city centre and near Sicilia .").unwrap();
    let v = fact_oracle(&foreign, &r, &lex);
    check(v.hallucinated_values >= 1 && v.score < 1.0, "oracle foreign value");
    check(
        close(v.omission_score, 0.75) && close(v.hallucination_score, 0.5) && close(v.score, 0.5),
        "oracle three plus one foreign",
    );
    let injected = lex.encode("Vaults is a pub in the city centre near Raja and rated good .").unwrap();
    check(pairwise_judge(&r, &gold, &injected, &lex) == JudgeResult::WinA, "judge dominance");
    check(pairwise_judge(&r, &gold, &gold, &lex) == JudgeResult::Tie, "judge identity");
    let a = lex.encode("Vaults is a pub in the city centre near Raja with cheap prices .").unwrap();
    let b = lex.encode("Vaults is a pub .").unwrap();
    check(pairwise_judge(&r, &a, &b, &lex) == JudgeResult::WinB, "judge hallucinations dominate");

    // McNemar
    let m = mcnemar_test(7, 7).unwrap();
    check(m.statistic == 0.0 && m.p_value == 1.0, "mcnemar symmetric");
    check(close(mcnemar_test(10, 0).unwrap().statistic, 10.0), "mcnemar 10/0");
    let m = mcnemar_test(12, 4).unwrap();
    check(
        close(m.statistic, 4.0) && close(m.p_value, normal_two_sided(2.0)) && (m.p_value - 0.0455).abs() < 5e-5,
        "mcnemar p",
    );

    // Paired t
    let t = paired_t_test(&[0.3, 0.6, 0.9], &[0.3, 0.6, 0.9]).unwrap();
    check(t.statistic == 0.0 && t.p_value == 1.0, "paired t equal");
    check(paired_t_test(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]).is_err(), "paired t zero variance");
    let t = paired_t_test(&[1.0, 2.0, 3.0], &[0.0, 0.0, 0.0]).unwrap();
    check(
        close(t.statistic, 2.0 * 3f64.sqrt())
            && close(t.p_value, t_two_sided(t.statistic, 2.0))
            && (t.p_value - 0.0742).abs() < 5e-5,
        "paired t 3.464",
    );

    verdict(
        5,
        "metric oracles",
        failures.is_empty(),
        &if failures.is_empty() { "all examples reproduced".into() } else { failures.join(", ") },
    );
}

struct ReferenceRun {
    dir: PathBuf,
    artifacts: PipelineArtifacts,
    _guard: tempfile::TempDir,
}

fn reference_config(dir: PathBuf) -> PipelineConfig {
    PipelineConfig { out_dir: dir, ..PipelineConfig::default() }
}

fn reference_run() -> &'static ReferenceRun {
    static RUN: OnceLock<ReferenceRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let guard = tempfile::tempdir().unwrap();
        let dir = guard.path().to_path_buf();
        let artifacts = run_scope_pipeline(&reference_config(dir.clone())).unwrap();
        ReferenceRun { dir, artifacts, _guard: guard }
    })
}

struct AlphaStudy {
    rows: Vec<SweepRow>,
    negatives: Vec<NegativeQuality>,
}

fn alpha_study() -> &'static AlphaStudy {
    static STUDY: OnceLock<AlphaStudy> = OnceLock::new();
    STUDY.get_or_init(|| {
        let reference = reference_run();
        let mut ws = Workspace::open(reference_config(reference.dir.clone())).unwrap();
        let negatives = negative_quality(&mut ws, &[0.0, 0.25, 0.5, 0.75, 1.0]).unwrap();
        let rows = alpha_sweep(&mut ws, &[0.1, 0.5, 0.9]).unwrap();
        AlphaStudy { rows, negatives }
    })
}

fn row(alpha: f64) -> &'static SweepRow {
    alpha_study().rows.iter().find(|r| r.value == alpha).unwrap()
}

#[test]
fn criterion_06_end_to_end_direction() {
    let report = &reference_run().artifacts.report;
    let scope = report.system("scope").unwrap();
    let sft = report.system("sft_full").unwrap();
    let judge = scope.judge.unwrap();
    let p = scope.significance.and_then(|s| s.mcnemar).map_or(1.0, |m| m.p_value);
    let a = scope.hallucination_rate < sft.hallucination_rate;
    let b = judge.win > judge.loss && p < 0.05;
    let c = scope.oracle_score >= sft.oracle_score + 0.03;
    verdict(
        6,
        "end-to-end direction",
        a && b && c,
        &format!(
            "hallucination rate {:.4} vs {:.4}; judge {}/{}/{} p={p:.3e}; oracle {:.4} vs {:.4}",
            scope.hallucination_rate,
            sft.hallucination_rate,
            judge.win,
            judge.tie,
            judge.loss,
            scope.oracle_score,
            sft.oracle_score
        ),
    );
}

#[test]
fn criterion_07_regimes() {
    let labels: Vec<RegimeLabel> = [0.1, 0.5, 0.9].iter().map(|&a| row(a).regime.unwrap()).collect();
    let ok = labels[0] == RegimeLabel::Degenerate
        && labels[1] == RegimeLabel::Effective
        && matches!(labels[2], RegimeLabel::Trivial | RegimeLabel::Effective);
    verdict(7, "regime reproduction", ok, &format!("alpha 0.1/0.5/0.9 -> {}/{}/{}", labels[0], labels[1], labels[2]));
}

/// Spearman rank correlation with average ranks for ties.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for k in i..=j {
                r[idx[k]] = (i + j) as f64 / 2.0 + 1.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn criterion_08_negative_quality_curve() {
    let q = &alpha_study().negatives;
    let alphas: Vec<f64> = q.iter().map(|n| n.alpha).collect();
    let scores: Vec<f64> = q.iter().map(|n| n.oracle_score).collect();
    let inversions = scores.windows(2).filter(|w| w[1] > w[0]).count();
    let rho = spearman(&alphas, &scores);
    let shown: Vec<String> = scores.iter().map(|s| format!("{s:.3}")).collect();
    verdict(
        8,
        "negative-quality curve",
        inversions <= 1 && rho < -0.7,
        &format!("scores [{}], {inversions} inversions, rho {rho:.3}", shown.join(", ")),
    );
}

#[test]
fn criterion_09_bleu_shape() {
    let (lo, mid) = (row(0.1).bleu.unwrap(), row(0.5).bleu.unwrap());
    verdict(9, "BLEU versus alpha", lo < mid, &format!("BLEU alpha 0.1 = {lo:.2}, alpha 0.5 = {mid:.2}"));
}

#[test]
fn criterion_10_half_data_sanity() {
    let report = &reference_run().artifacts.report;
    let d1 = report.system("sft_d1").unwrap().oracle_score;
    let full = report.system("sft_full").unwrap().oracle_score;
    verdict(10, "half-data sanity", (d1 - full).abs() <= 0.1, &format!("D1 {d1:.4} vs full {full:.4}"));
}

#[test]
fn criterion_11_determinism() {
    let first = std::fs::read(reference_run().dir.join("reports/eval_report.json")).unwrap();
    let guard = tempfile::tempdir().unwrap();
    run_scope_pipeline(&reference_config(guard.path().to_path_buf())).unwrap();
    let second = std::fs::read(guard.path().join("reports/eval_report.json")).unwrap();
    verdict(11, "determinism", first == second, &format!("{} and {} bytes", first.len(), second.len()));
}
