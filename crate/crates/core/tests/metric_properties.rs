use proptest::prelude::*;
use rand::seq::SliceRandom;
use scope_lab::corpus::{generate_corpus, CorpusConfig, Example};
use scope_lab::metrics::{bleu, fact_oracle, mcnemar_test, pairwise_judge, parent_recall, rouge_l, JudgeResult};
use scope_lab::rng::stream_rng;

fn corpus() -> (CorpusConfig, Vec<Example>) {
    let cfg = CorpusConfig { num_records: 400, ..CorpusConfig::reference() };
    let data = generate_corpus(&cfg).unwrap();
    (cfg, data)
}

/// A corrupted variant of a gold target: drops and repeats some tokens and
/// injects tokens from another example.
fn perturb(gold: &[u32], other: &[u32], seed: u64) -> Vec<u32> {
    let mut rng = stream_rng(seed, 0);
    let mut out: Vec<u32> = gold.iter().copied().filter(|_| rand::Rng::random_bool(&mut rng, 0.8)).collect();
    let k = rand::Rng::random_range(&mut rng, 0..=other.len().min(4));
    let at = rand::Rng::random_range(&mut rng, 0..=out.len());
    out.splice(at..at, other[..k].iter().copied());
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn appending_record_values_never_lowers_parent(i in 0usize..400, seed in any::<u64>(), pick in 0usize..8) {
        let (cfg, data) = corpus();
        let lex = cfg.lexicon().unwrap();
        let e = &data[i];
        let j = (i + 1) % data.len();
        let cand = perturb(&e.target_tokens, &data[j].target_tokens, seed);
        let before = parent_recall(&cand, &e.record, &lex, 4);
        let fact = e.record.facts[pick % e.record.facts.len()];
        let mut longer = cand.clone();
        longer.extend_from_slice(lex.value_tokens(fact.value));
        prop_assert!(parent_recall(&longer, &e.record, &lex, 4) >= before);
    }

    #[test]
    fn corpus_scores_ignore_pair_order(seed in any::<u64>(), n in 2usize..60) {
        let (_, data) = corpus();
        let refs: Vec<Vec<u32>> = data[..n].iter().map(|e| e.target_tokens.clone()).collect();
        let cands: Vec<Vec<u32>> = (0..n).map(|k| perturb(&refs[k], &refs[(k + 1) % n], seed ^ k as u64)).collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream_rng(seed, 1));
        let sc: Vec<&Vec<u32>> = order.iter().map(|&k| &cands[k]).collect();
        let sr: Vec<&Vec<u32>> = order.iter().map(|&k| &refs[k]).collect();
        prop_assert_eq!(bleu(&cands, &refs, 4).unwrap(), bleu(&sc, &sr, 4).unwrap());
        let mean_rouge = |c: &[&Vec<u32>], r: &[&Vec<u32>]| {
            let mut v: Vec<f64> = c.iter().zip(r).filter(|(a, _)| !a.is_empty()).map(|(a, b)| rouge_l(a, b).unwrap()).collect();
            v.sort_by(f64::total_cmp);
            v
        };
        let plain: Vec<&Vec<u32>> = cands.iter().collect();
        let plain_r: Vec<&Vec<u32>> = refs.iter().collect();
        prop_assert_eq!(mean_rouge(&plain, &plain_r), mean_rouge(&sc, &sr));
    }

    #[test]
    fn judge_is_antisymmetric(i in 0usize..400, s1 in any::<u64>(), s2 in any::<u64>()) {
        let (cfg, data) = corpus();
        let lex = cfg.lexicon().unwrap();
        let e = &data[i];
        let other = &data[(i + 7) % data.len()].target_tokens;
        let (a, b) = (perturb(&e.target_tokens, other, s1), perturb(&e.target_tokens, other, s2));
        let ab = pairwise_judge(&e.record, &a, &b, &lex);
        let ba = pairwise_judge(&e.record, &b, &a, &lex);
        prop_assert_eq!(ab.swapped(), ba);
        prop_assert_eq!(ab == JudgeResult::Tie, ba == JudgeResult::Tie);
    }

    #[test]
    fn mcnemar_is_symmetric(a in 0u64..5000, b in 0u64..5000) {
        prop_assume!(a + b > 0);
        let (x, y) = (mcnemar_test(a, b).unwrap(), mcnemar_test(b, a).unwrap());
        prop_assert_eq!(x.statistic, y.statistic);
        prop_assert_eq!(x.p_value, y.p_value);
        prop_assert!((0.0..=1.0).contains(&x.p_value) && x.statistic >= 0.0);
    }

    #[test]
    fn metrics_stay_in_range(i in 0usize..400, seed in any::<u64>()) {
        let (cfg, data) = corpus();
        let lex = cfg.lexicon().unwrap();
        let e = &data[i];
        let cand = perturb(&e.target_tokens, &data[(i + 3) % data.len()].target_tokens, seed);
        let v = fact_oracle(&cand, &e.record, &lex);
        for s in [v.score, v.omission_score, v.hallucination_score] {
            prop_assert!((0.0..=1.0).contains(&s));
        }
        prop_assert_eq!(v.score, v.omission_score.min(v.hallucination_score));
        prop_assert_eq!(v.score == 1.0, v.omitted_facts == 0 && v.hallucinated_values == 0);
        prop_assert!((0.0..=1.0).contains(&parent_recall(&cand, &e.record, &lex, 4)));
        let b = bleu(&[&cand], &[&e.target_tokens], 4).unwrap();
        prop_assert!((0.0..=100.0).contains(&b));
        if !cand.is_empty() {
            prop_assert!((0.0..=1.0).contains(&rouge_l(&cand, &e.target_tokens).unwrap()));
        }
    }
}
