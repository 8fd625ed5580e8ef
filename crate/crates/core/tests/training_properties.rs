use rand::Rng;
use scope_lab::corpus::{Example, Record, Specials, TokenId};
use scope_lab::model::{init_params, ModelConfig, Parameters};
use scope_lab::rng::stream_rng;
use scope_lab::training::{
    adam_step, dpo_loss_and_grad, mle_loss_and_grad, train_dpo, train_sft, AdamConfig, AdamState, PreferenceTriple,
    TrainConfig,
};

fn model(seed: u64) -> Parameters {
    let cfg = ModelConfig { vocab_size: 18, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 16, max_seq_len: 24, seed };
    let mut p = init_params(&cfg).unwrap();
    for v in p.as_mut_slice() {
        *v *= 6.0;
    }
    p
}

fn seq(rng: &mut impl Rng, len: usize) -> Vec<TokenId> {
    let mut s: Vec<TokenId> = (0..len).map(|_| rng.random_range(7..18)).collect();
    s.push(Specials::fixed().eos);
    s
}

fn batch(rng: &mut impl Rng, n: usize) -> Vec<Example> {
    (0..n)
        .map(|i| Example {
            record: Record { entity_id: i as u64, facts: vec![] },
            context_tokens: seq(rng, 4),
            target_tokens: seq(rng, 5),
        })
        .collect()
}

fn triples(rng: &mut impl Rng, n: usize) -> Vec<PreferenceTriple> {
    (0..n).map(|i| PreferenceTriple::new(seq(rng, 4), seq(rng, 5), seq(rng, 6), 0.5, i as u64)).collect()
}

#[test]
fn small_adam_step_does_not_increase_batch_loss() {
    for trial in 0..50 {
        let mut rng = stream_rng(300, trial);
        let mut p = model(trial);
        let b = batch(&mut rng, 4);
        let (before, g) = mle_loss_and_grad(&p, &b).unwrap();
        let mut state = AdamState::new(&p);
        adam_step(&mut p, &g, &mut state, &AdamConfig { learning_rate: 1e-5, ..Default::default() }).unwrap();
        let (after, _) = mle_loss_and_grad(&p, &b).unwrap();
        assert!(after <= before, "trial {trial}: {before} -> {after}");
    }
}

#[test]
fn training_is_a_pure_function_of_inputs() {
    let mut rng = stream_rng(301, 0);
    let p = model(1);
    let data = batch(&mut rng, 24);
    let cfg = TrainConfig { learning_rate: 3e-3, batch_size: 5, epochs: 2, seed: 4, ..Default::default() };
    let (a, ta) = train_sft(&p, &data, &cfg).unwrap();
    let (b, tb) = train_sft(&p, &data, &cfg).unwrap();
    assert_eq!(a.as_slice(), b.as_slice());
    assert_eq!(ta, tb);
    let ts = triples(&mut rng, 20);
    let (c, tc) = train_dpo(&a, &ts, &cfg).unwrap();
    let (d, td) = train_dpo(&a, &ts, &cfg).unwrap();
    assert_eq!(c.as_slice(), d.as_slice());
    assert_eq!(tc, td);
    let (e, _) = train_dpo(&a, &ts, &TrainConfig { seed: 5, ..cfg }).unwrap();
    assert_ne!(c.as_slice(), e.as_slice());
}

#[test]
fn reference_stays_frozen_during_preference_tuning() {
    let mut rng = stream_rng(302, 0);
    let reference = model(2);
    let copy = reference.clone();
    let ts = triples(&mut rng, 12);
    let cfg = TrainConfig { learning_rate: 1e-2, batch_size: 4, epochs: 3, ..Default::default() };
    let (policy, _) = train_dpo(&reference, &ts, &cfg).unwrap();
    assert_eq!(reference.as_slice(), copy.as_slice());
    assert_ne!(policy.as_slice(), reference.as_slice());
    // Loss at the returned policy is measured against the untouched reference.
    let (loss, _) = dpo_loss_and_grad(&policy, &reference, &ts, cfg.beta).unwrap();
    assert!(loss < std::f64::consts::LN_2);
}

#[test]
fn raising_preferred_likelihood_lowers_the_loss() {
    // Ascending log p(y+) alone, with y- fixed, must move the DPO loss down.
    for trial in 0..20 {
        let mut rng = stream_rng(303, trial);
        let reference = model(10 + trial);
        let mut policy = reference.clone();
        for v in policy.as_mut_slice() {
            *v += 0.02 * (rng.random::<f64>() - 0.5);
        }
        let t = triples(&mut rng, 1);
        let only_preferred: Vec<Example> = vec![Example {
            record: Record { entity_id: 0, facts: vec![] },
            context_tokens: t[0].context_tokens.clone(),
            target_tokens: t[0].preferred_tokens.clone(),
        }];
        let (_, nll_grad) = mle_loss_and_grad(&policy, &only_preferred).unwrap();
        let (_, dpo_grad) = dpo_loss_and_grad(&policy, &reference, &t, 0.1).unwrap();
        // Remove the component of the direction that also moves log p(y-).
        let only_rejected: Vec<Example> = vec![Example {
            record: Record { entity_id: 0, facts: vec![] },
            context_tokens: t[0].context_tokens.clone(),
            target_tokens: t[0].rejected_tokens.clone(),
        }];
        let (_, rej_grad) = mle_loss_and_grad(&policy, &only_rejected).unwrap();
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let up: Vec<f64> = nll_grad.iter().map(|g| -g).collect();
        let k = dot(&up, &rej_grad) / dot(&rej_grad, &rej_grad);
        let dir: Vec<f64> = up.iter().zip(&rej_grad).map(|(u, r)| u - k * r).collect();
        assert!(dot(&dpo_grad, &dir) < 0.0, "trial {trial}");
    }
}
