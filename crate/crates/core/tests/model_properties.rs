//! Gradient, causality, normalization and loss checks for the transformer.

mod common;

use ndarray::Array2;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use revcurse::model::{
    self, batch_loss_and_grads, example_loss, forward, init, AdamConfig, AdamState, AttentionMode, ModelConfig,
};
use revcurse::objectives::TrainingExample;

use common::{config, loss_only, max_rel_error, naive_cross_entropy, random_batch};

#[test]
fn gradients_match_central_differences_causal() {
    let (err, at) = max_rel_error(AttentionMode::Causal, false, 1);
    assert!(err < 1e-4, "max relative error {err:e} at {at}");
}

#[test]
fn gradients_match_central_differences_bidirectional_tied() {
    let (err, at) = max_rel_error(AttentionMode::Bidirectional, true, 2);
    assert!(err < 1e-4, "max relative error {err:e} at {at}");
}

#[test]
fn causal_logits_ignore_future_tokens_bit_exactly() {
    let cfg = config(AttentionMode::Causal, false);
    let params = init::<f32>(&cfg, 4).unwrap();
    let base = vec![3u32, 7, 1, 9, 4, 12];
    let (before, _) = forward(&params, &base, &[]).unwrap();
    for j in 0..base.len() {
        let mut perturbed = base.clone();
        perturbed[j] = (perturbed[j] + 5) % cfg.vocab_size as u32;
        let (after, _) = forward(&params, &perturbed, &[]).unwrap();
        for i in 0..j {
            let a: Vec<u32> = before.row(i).iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = after.row(i).iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "position {i} changed when token {j} was perturbed");
        }
    }
}

#[test]
fn tracing_does_not_change_logits() {
    let cfg = config(AttentionMode::Bidirectional, false);
    let params = init::<f32>(&cfg, 5).unwrap();
    let tokens = [1u32, 2, 3, 4];
    let (plain, _) = forward(&params, &tokens, &[]).unwrap();
    let (traced, trace) = forward(&params, &tokens, &[0, 2, 3]).unwrap();
    assert_eq!(plain, traced);
    assert_eq!(trace.layers.len(), cfg.n_layers);
}

#[test]
fn init_is_deterministic_and_matches_declared_std() {
    let cfg = ModelConfig::standard(500, 16, AttentionMode::Causal);
    let a = init::<f32>(&cfg, 11).unwrap();
    let b = init::<f32>(&cfg, 11).unwrap();
    assert_eq!(a, b);
    for (name, t) in a.tensors() {
        match model::transformer::init_std(&name, cfg.n_layers) {
            Some(target) => {
                let n = t.len() as f64;
                let mean = t.iter().map(|&v| v as f64).sum::<f64>() / n;
                let std = (t.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
                assert!((std - target).abs() <= 0.1 * target, "{name}: std {std} vs {target}");
            }
            None => assert!(t.iter().all(|&v| v == 0.0 || v == 1.0), "{name} should be constant"),
        }
    }
}

#[test]
fn uniform_logits_give_ln_vocab() {
    let v = 13;
    let logits = Array2::<f64>::zeros((4, v));
    let ex = TrainingExample {
        input: vec![1, 2, 3, 4],
        target: vec![5, 6, 7, 8],
        loss_mask: vec![true, false, true, true],
        attention: AttentionMode::Causal,
    };
    assert!((example_loss(&logits, &ex).unwrap() - (v as f64).ln()).abs() < 1e-12);
    let empty = TrainingExample { loss_mask: vec![false; 4], ..ex };
    assert_eq!(example_loss(&logits, &empty), None);
}

#[test]
fn empty_loss_mask_leaves_parameters_untouched() {
    let cfg = config(AttentionMode::Causal, false);
    let mut params = init::<f32>(&cfg, 0).unwrap();
    let before = params.clone();
    let mut adam = AdamState::new(&params, AdamConfig::default());
    let ex = TrainingExample {
        input: vec![1, 2],
        target: vec![2, 0],
        loss_mask: vec![false, false],
        attention: AttentionMode::Causal,
    };
    assert_eq!(model::grad_step(&mut params, &[ex], &mut adam, 1e-3).unwrap(), None);
    assert_eq!(params, before);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let cfg = config(AttentionMode::Bidirectional, false);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut params = init::<f32>(&cfg, 0).unwrap();
    let before = params.clone();
    let mut adam = AdamState::new(&params, AdamConfig::default());
    let batch = random_batch(&mut rng, &cfg, 4);
    assert!(model::grad_step(&mut params, &batch, &mut adam, 0.0).unwrap().is_some());
    assert_eq!(params, before);
}

#[test]
fn repeated_steps_memorize_one_example() {
    let cfg = config(AttentionMode::Causal, false);
    let mut params = init::<f32>(&cfg, 3).unwrap();
    let mut adam = AdamState::new(&params, AdamConfig::default());
    let ex = TrainingExample {
        input: vec![4, 9, 2, 7],
        target: vec![9, 2, 7, 0],
        loss_mask: vec![true, true, true, false],
        attention: AttentionMode::Causal,
    };
    let mut last = f64::INFINITY;
    for _ in 0..300 {
        last = model::grad_step(&mut params, std::slice::from_ref(&ex), &mut adam, 1e-2).unwrap().unwrap();
    }
    let (logits, _) = forward(&params, &ex.input, &[]).unwrap();
    let final_loss = example_loss(&logits, &ex).unwrap();
    assert!(final_loss < 0.01, "loss {final_loss} (last step {last})");
}

#[test]
fn mismatched_attention_is_rejected() {
    let cfg = config(AttentionMode::Causal, false);
    let params = init::<f32>(&cfg, 0).unwrap();
    let ex = TrainingExample {
        input: vec![1, 2],
        target: vec![2, 0],
        loss_mask: vec![true, false],
        attention: AttentionMode::Bidirectional,
    };
    assert!(batch_loss_and_grads(&params, &[ex]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn batch_loss_matches_naive_cross_entropy(seed in any::<u64>(), causal in any::<bool>()) {
        let attention = if causal { AttentionMode::Causal } else { AttentionMode::Bidirectional };
        let cfg = config(attention, false);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init::<f64>(&cfg, seed).unwrap();
        let batch = random_batch(&mut rng, &cfg, 3);
        let (loss, _) = batch_loss_and_grads(&params, &batch).unwrap().unwrap();
        prop_assert!((loss - loss_only(&params, &batch)).abs() < 1e-10);
        for ex in &batch {
            let (logits, _) = forward(&params, &ex.input, &[]).unwrap();
            let a = example_loss(&logits, ex).unwrap();
            let b = naive_cross_entropy(&logits, ex).unwrap();
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(seed in any::<u64>(), len in 1usize..7) {
        let cfg = config(AttentionMode::Bidirectional, false);
        let params = init::<f32>(&cfg, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tokens: Vec<u32> = (0..len).map(|_| rng.random_range(0..13)).collect();
        let (logits, _) = forward(&params, &tokens, &[]).unwrap();
        let probs = model::tape::softmax_rows(logits.view());
        for row in probs.outer_iter() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-6);
        }
    }
}
