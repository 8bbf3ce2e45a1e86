//! Oracles shared by the model tests and the acceptance suite.
#![allow(dead_code)]

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use revcurse::model::{batch_loss_and_grads, forward, init, AttentionMode, ModelConfig, Parameters};
use revcurse::objectives::TrainingExample;

pub fn config(attention: AttentionMode, tie: bool) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_mlp: 16,
        vocab_size: 13,
        max_seq_len: 7,
        attention,
        tie_embeddings: tie,
    }
}

pub fn random_batch(rng: &mut ChaCha8Rng, cfg: &ModelConfig, n: usize) -> Vec<TrainingExample> {
    (0..n)
        .map(|_| {
            let len = rng.random_range(2..=cfg.max_seq_len);
            let input: Vec<u32> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
            let target: Vec<u32> = (0..len).map(|_| rng.random_range(0..cfg.vocab_size as u32)).collect();
            let mut loss_mask: Vec<bool> = (0..len).map(|_| rng.random_bool(0.6)).collect();
            loss_mask[0] = true;
            TrainingExample { input, target, loss_mask, attention: cfg.attention }
        })
        .collect()
}

/// Batch loss recomputed from logits without the fused loss op.
pub fn loss_only(params: &Parameters<f64>, batch: &[TrainingExample]) -> f64 {
    let losses: Vec<f64> = batch
        .iter()
        .filter_map(|ex| {
            let (logits, _) = forward(params, &ex.input, &[]).unwrap();
            naive_cross_entropy(&logits, ex)
        })
        .collect();
    losses.iter().sum::<f64>() / losses.len() as f64
}

pub fn naive_cross_entropy(logits: &Array2<f64>, ex: &TrainingExample) -> Option<f64> {
    let mut terms = Vec::new();
    for i in 0..ex.input.len() {
        if !ex.loss_mask[i] {
            continue;
        }
        let z: f64 = logits.row(i).iter().map(|v| v.exp()).sum();
        let p = logits[[i, ex.target[i] as usize]].exp() / z;
        terms.push(-p.ln());
    }
    if terms.is_empty() {
        None
    } else {
        Some(terms.iter().sum::<f64>() / terms.len() as f64)
    }
}

pub fn max_rel_error(attention: AttentionMode, tie: bool, seed: u64) -> (f64, String) {
    let cfg = config(attention, tie);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = init::<f64>(&cfg, seed).unwrap();
    // Move off the symmetric initialization so every tensor carries signal.
    for t in params.tensors_mut() {
        t.mapv_inplace(|v| v + rng.random_range(-0.3..0.3));
    }
    let batch = random_batch(&mut rng, &cfg, 3);
    let (_, grads) = batch_loss_and_grads(&params, &batch).unwrap().unwrap();
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let h = 1e-3;
    let mut worst = (0.0, String::new());
    for (ti, name) in names.iter().enumerate() {
        let analytic = grads[ti].as_slice().unwrap();
        let mut diff = 0.0;
        let mut scale_a = 0.0;
        let mut scale_n = 0.0;
        for (idx, &a) in analytic.iter().enumerate() {
            let mut plus = params.clone();
            plus.tensors_mut()[ti].as_slice_mut().unwrap()[idx] += h;
            let mut minus = params.clone();
            minus.tensors_mut()[ti].as_slice_mut().unwrap()[idx] -= h;
            let numeric = (loss_only(&plus, &batch) - loss_only(&minus, &batch)) / (2.0 * h);
            diff += (a - numeric).powi(2);
            scale_a += a * a;
            scale_n += numeric * numeric;
        }
        // Relative error of the whole tensor gradient, so entries near zero do not dominate.
        let rel = diff.sqrt() / scale_a.sqrt().max(scale_n.sqrt()).max(1e-12);
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
    }
    worst
}
