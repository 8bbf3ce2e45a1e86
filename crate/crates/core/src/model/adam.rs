//! Adam with bias correction, optional decoupled weight decay and global
//! gradient-norm clipping.

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::tape::{cast, Scalar};
use super::transformer::Parameters;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Rescale the full gradient when its L2 norm exceeds this.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, clip_norm: Some(1.0) }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<F> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Array2<F>>,
    v: Vec<Array2<F>>,
}

impl<F: Scalar> AdamState<F> {
    pub fn new(params: &Parameters<F>, config: AdamConfig) -> Self {
        let zeros: Vec<Array2<F>> =
            params.tensors().iter().map(|(_, t)| Array2::zeros(t.dim())).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// Applies one update in place. `grads` follows the canonical tensor order.
    pub fn update(&mut self, params: &mut Parameters<F>, grads: &[Array2<F>], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "gradient count does not match the parameters");
        self.step += 1;
        let c = self.config;
        let norm = grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|&x| {
                let x = x.to_f64().unwrap_or(0.0);
                x * x
            })
            .sum::<f64>()
            .sqrt();
        let clip = match c.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let (b1, b2) = (cast::<F>(c.beta1), cast::<F>(c.beta2));
        let (one_b1, one_b2) = (cast::<F>(1.0 - c.beta1), cast::<F>(1.0 - c.beta2));
        let clip = cast::<F>(clip);
        let step_size = cast::<F>(lr / bc1);
        let inv_bc2_sqrt = cast::<F>(1.0 / bc2.sqrt());
        let eps = cast::<F>(c.eps);
        let decay = cast::<F>(1.0 - lr * c.weight_decay);

        for (((p, g), m), v) in
            params.tensors_mut().into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v)
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                let g = g * clip;
                *m = b1 * *m + one_b1 * g;
                *v = b2 * *v + one_b2 * g * g;
                *p = *p * decay - step_size * *m / ((*v).sqrt() * inv_bc2_sqrt + eps);
            });
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init, AttentionMode, ModelConfig};

    #[test]
    fn first_step_moves_each_coordinate_by_lr() {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 4,
            n_heads: 1,
            d_mlp: 4,
            vocab_size: 5,
            max_seq_len: 3,
            attention: AttentionMode::Causal,
            tie_embeddings: false,
        };
        let mut params = init::<f64>(&cfg, 0).unwrap();
        let before = params.clone();
        let config = AdamConfig { clip_norm: None, ..AdamConfig::default() };
        let mut state = AdamState::new(&params, config);
        let grads: Vec<Array2<f64>> =
            params.tensors().iter().map(|(_, t)| Array2::from_elem(t.dim(), 0.5)).collect();
        state.update(&mut params, &grads, 0.01);
        // With bias correction the first Adam step is lr * sign(g).
        let delta = &before.tok_emb - &params.tok_emb;
        assert!(delta.iter().all(|d| (d - 0.01).abs() < 1e-6));
    }
}
