//! Parameters, initialization and the forward/backward pass.
//!
//! Each block is pre-norm:
//! `x += Attn(LN(x)); x += W_out(GELU(W_in LN(x)))`, with learned absolute
//! position embeddings and a final layer norm before the output head. The
//! traced MLP activation is the GELU output, before the down-projection.

use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::adam::AdamState;
use super::tape::{cast, Scalar, SeqLayout, Tape, Var};
use super::{AttentionMode, ModelConfig, ModelError};
use crate::corpus::TokenId;
use crate::objectives::TrainingExample;

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    pub ln1_gain: Array2<F>,
    pub ln1_bias: Array2<F>,
    pub wq: Array2<F>,
    pub bq: Array2<F>,
    pub wk: Array2<F>,
    pub bk: Array2<F>,
    pub wv: Array2<F>,
    pub bv: Array2<F>,
    pub wo: Array2<F>,
    pub bo: Array2<F>,
    pub ln2_gain: Array2<F>,
    pub ln2_bias: Array2<F>,
    pub w_in: Array2<F>,
    pub b_in: Array2<F>,
    pub w_out: Array2<F>,
    pub b_out: Array2<F>,
}

const LAYER_TENSORS: [&str; 16] = [
    "ln1.gain", "ln1.bias", "attn.wq", "attn.bq", "attn.wk", "attn.bk", "attn.wv", "attn.bv",
    "attn.wo", "attn.bo", "ln2.gain", "ln2.bias", "mlp.w_in", "mlp.b_in", "mlp.w_out", "mlp.b_out",
];

impl<F> LayerParams<F> {
    fn tensors(&self) -> [&Array2<F>; 16] {
        [
            &self.ln1_gain, &self.ln1_bias, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv,
            &self.bv, &self.wo, &self.bo, &self.ln2_gain, &self.ln2_bias, &self.w_in, &self.b_in,
            &self.w_out, &self.b_out,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Array2<F>; 16] {
        [
            &mut self.ln1_gain, &mut self.ln1_bias, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_gain, &mut self.ln2_bias, &mut self.w_in, &mut self.b_in,
            &mut self.w_out, &mut self.b_out,
        ]
    }
}

/// All trainable tensors of a model. Vectors are stored as `1 x n` rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F> {
    pub config: ModelConfig,
    pub tok_emb: Array2<F>,
    pub pos_emb: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub lnf_gain: Array2<F>,
    pub lnf_bias: Array2<F>,
    /// Absent when the token embedding is tied to the output head.
    pub head_w: Option<Array2<F>>,
    pub head_b: Array2<F>,
}

impl<F: Scalar> Parameters<F> {
    /// Tensors in canonical order with their names.
    pub fn tensors(&self) -> Vec<(String, &Array2<F>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_TENSORS.iter().zip(layer.tensors()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("lnf.gain".to_string(), &self.lnf_gain));
        out.push(("lnf.bias".to_string(), &self.lnf_bias));
        if let Some(w) = &self.head_w {
            out.push(("head.w".to_string(), w));
        }
        out.push(("head.b".to_string(), &self.head_b));
        out
    }

    /// Mutable tensors in the same order as [`Parameters::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Array2<F>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        if let Some(w) = &mut self.head_w {
            out.push(w);
        }
        out.push(&mut self.head_b);
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Converts every tensor to another element type.
    pub fn cast<G: Scalar>(&self) -> Parameters<G> {
        let conv = |a: &Array2<F>| a.mapv(|x| cast::<G>(x.to_f64().expect("finite")));
        Parameters {
            config: self.config,
            tok_emb: conv(&self.tok_emb),
            pos_emb: conv(&self.pos_emb),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: conv(&l.ln1_gain),
                    ln1_bias: conv(&l.ln1_bias),
                    wq: conv(&l.wq),
                    bq: conv(&l.bq),
                    wk: conv(&l.wk),
                    bk: conv(&l.bk),
                    wv: conv(&l.wv),
                    bv: conv(&l.bv),
                    wo: conv(&l.wo),
                    bo: conv(&l.bo),
                    ln2_gain: conv(&l.ln2_gain),
                    ln2_bias: conv(&l.ln2_bias),
                    w_in: conv(&l.w_in),
                    b_in: conv(&l.b_in),
                    w_out: conv(&l.w_out),
                    b_out: conv(&l.b_out),
                })
                .collect(),
            lnf_gain: conv(&self.lnf_gain),
            lnf_bias: conv(&self.lnf_bias),
            head_w: self.head_w.as_ref().map(conv),
            head_b: conv(&self.head_b),
        }
    }
}

/// Standard deviation the initializer targets for a named tensor; `None` for
/// tensors initialized to constants (biases, layer-norm gains).
pub fn init_std(name: &str, n_layers: usize) -> Option<f64> {
    if name.ends_with("attn.wo") || name.ends_with("mlp.w_out") {
        Some(INIT_STD / (2.0 * n_layers as f64).sqrt())
    } else if name.ends_with("emb")
        || name.ends_with(".wq")
        || name.ends_with(".wk")
        || name.ends_with(".wv")
        || name.ends_with("mlp.w_in")
        || name == "head.w"
    {
        Some(INIT_STD)
    } else {
        None
    }
}

/// Deterministic initialization: N(0, 0.02) weights, residual output
/// projections scaled by `1/sqrt(2 * n_layers)`, zero biases, unit gains.
pub fn init<F: Scalar>(config: &ModelConfig, seed: u64) -> Result<Parameters<F>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (d, m, v) = (config.d_model, config.d_mlp, config.vocab_size);
    let mut normal = |rows: usize, cols: usize, std: f64| -> Array2<F> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Array2::from_shape_fn((rows, cols), |_| cast::<F>(dist.sample(&mut rng)))
    };
    let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
    let zeros = |n: usize| Array2::<F>::zeros((1, n));
    let ones = |n: usize| Array2::<F>::ones((1, n));

    let tok_emb = normal(v, d, INIT_STD);
    let pos_emb = normal(config.max_seq_len, d, INIT_STD);
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        layers.push(LayerParams {
            ln1_gain: ones(d),
            ln1_bias: zeros(d),
            wq: normal(d, d, INIT_STD),
            bq: zeros(d),
            wk: normal(d, d, INIT_STD),
            bk: zeros(d),
            wv: normal(d, d, INIT_STD),
            bv: zeros(d),
            wo: normal(d, d, resid_std),
            bo: zeros(d),
            ln2_gain: ones(d),
            ln2_bias: zeros(d),
            w_in: normal(d, m, INIT_STD),
            b_in: zeros(m),
            w_out: normal(m, d, resid_std),
            b_out: zeros(d),
        });
    }
    let head_w = (!config.tie_embeddings).then(|| normal(d, v, INIT_STD));
    Ok(Parameters {
        config: *config,
        tok_emb,
        pos_emb,
        layers,
        lnf_gain: ones(d),
        lnf_bias: zeros(d),
        head_w,
        head_b: zeros(v),
    })
}

/// MLP activations (after the nonlinearity) at requested positions.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace<F> {
    pub positions: Vec<usize>,
    /// `layers[l]` has one row per entry of `positions`.
    pub layers: Vec<Array2<F>>,
}

impl<F: Scalar> ForwardTrace<F> {
    pub fn get(&self, layer: usize, position: usize) -> Option<ndarray::ArrayView1<'_, F>> {
        let row = self.positions.iter().position(|&p| p == position)?;
        self.layers.get(layer).map(|a| a.row(row))
    }
}

struct Packed<F> {
    tape: Tape<F>,
    params: Vec<Var>,
    logits: Var,
    mlp_acts: Vec<Var>,
    layout: Arc<SeqLayout>,
}

fn check_tokens(config: &ModelConfig, tokens: &[TokenId]) -> Result<(), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if tokens.len() > config.max_seq_len {
        return Err(ModelError::SequenceTooLong { len: tokens.len(), max: config.max_seq_len });
    }
    if let Some((position, &token)) =
        tokens.iter().enumerate().find(|(_, &t)| t as usize >= config.vocab_size)
    {
        return Err(ModelError::TokenOutOfRange { token, position, vocab_size: config.vocab_size });
    }
    Ok(())
}

/// Runs the model over several sequences packed into one matrix.
fn run_packed<F: Scalar, S: AsRef<[TokenId]>>(
    params: &Parameters<F>,
    seqs: &[S],
) -> Result<Packed<F>, ModelError> {
    let cfg = &params.config;
    let mut lengths = Vec::with_capacity(seqs.len());
    let mut ids = Vec::new();
    for seq in seqs {
        let seq = seq.as_ref();
        check_tokens(cfg, seq)?;
        lengths.push(seq.len());
        ids.extend(seq.iter().map(|&t| t as usize));
    }
    let layout = Arc::new(SeqLayout::from_lengths(&lengths));
    let positions = layout.positions();
    let causal = cfg.attention == AttentionMode::Causal;

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.tensors().into_iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let mut it = vars.iter().copied();
    let mut next = || it.next().expect("parameter order");

    let tok_emb = next();
    let pos_emb = next();
    let tok = tape.gather(tok_emb, &ids);
    let pos = tape.gather(pos_emb, &positions);
    let mut x = tape.add(tok, pos);
    let mut mlp_acts = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let l: Vec<Var> = (0..16).map(|_| next()).collect();
        let h = tape.layer_norm(x, l[0], l[1]);
        let q = tape.matmul(h, l[2]);
        let q = tape.add_row(q, l[3]);
        let k = tape.matmul(h, l[4]);
        let k = tape.add_row(k, l[5]);
        let v = tape.matmul(h, l[6]);
        let v = tape.add_row(v, l[7]);
        let a = tape.attention(q, k, v, layout.clone(), cfg.n_heads, causal);
        let a = tape.matmul(a, l[8]);
        let a = tape.add_row(a, l[9]);
        x = tape.add(x, a);
        let h = tape.layer_norm(x, l[10], l[11]);
        let u = tape.matmul(h, l[12]);
        let u = tape.add_row(u, l[13]);
        let g = tape.gelu(u);
        mlp_acts.push(g);
        let o = tape.matmul(g, l[14]);
        let o = tape.add_row(o, l[15]);
        x = tape.add(x, o);
    }
    let lnf_gain = next();
    let lnf_bias = next();
    let h = tape.layer_norm(x, lnf_gain, lnf_bias);
    let head = if cfg.tie_embeddings {
        tape.matmul_nt(h, tok_emb)
    } else {
        let w = next();
        tape.matmul(h, w)
    };
    let head_b = next();
    let logits = tape.add_row(head, head_b);
    Ok(Packed { tape, params: vars, logits, mlp_acts, layout })
}

fn trace_of<F: Scalar>(
    packed: &Packed<F>,
    offset: usize,
    len: usize,
    positions: &[usize],
) -> Result<ForwardTrace<F>, ModelError> {
    if let Some(&position) = positions.iter().find(|&&p| p >= len) {
        return Err(ModelError::TracePosition { position, len });
    }
    let layers = packed
        .mlp_acts
        .iter()
        .map(|&var| {
            let acts = packed.tape.value(var);
            let mut out = Array2::<F>::zeros((positions.len(), acts.ncols()));
            for (r, &p) in positions.iter().enumerate() {
                out.row_mut(r).assign(&acts.row(offset + p));
            }
            out
        })
        .collect();
    Ok(ForwardTrace { positions: positions.to_vec(), layers })
}

/// Logits `[len x vocab]` for one sequence plus MLP activations at
/// `trace_positions` for every layer.
pub fn forward<F: Scalar>(
    params: &Parameters<F>,
    tokens: &[TokenId],
    trace_positions: &[usize],
) -> Result<(Array2<F>, ForwardTrace<F>), ModelError> {
    let mut out = forward_batch(params, &[tokens], &[trace_positions.to_vec()])?;
    Ok(out.pop().expect("one sequence in, one out"))
}

/// Batched [`forward`]; `trace_positions[i]` applies to `seqs[i]` (missing
/// entries trace nothing).
pub fn forward_batch<F: Scalar, S: AsRef<[TokenId]>>(
    params: &Parameters<F>,
    seqs: &[S],
    trace_positions: &[Vec<usize>],
) -> Result<Vec<(Array2<F>, ForwardTrace<F>)>, ModelError> {
    if seqs.is_empty() {
        return Ok(Vec::new());
    }
    let packed = run_packed(params, seqs)?;
    let logits = packed.tape.value(packed.logits);
    packed
        .layout
        .segments()
        .enumerate()
        .map(|(i, (offset, len))| {
            let rows = logits.slice(ndarray::s![offset..offset + len, ..]).to_owned();
            let positions = trace_positions.get(i).map(Vec::as_slice).unwrap_or(&[]);
            Ok((rows, trace_of(&packed, offset, len, positions)?))
        })
        .collect()
}

/// Mean cross-entropy over the positions where `loss_mask` is set; `None`
/// when the mask is empty.
pub fn example_loss<F: Scalar>(logits: &Array2<F>, example: &TrainingExample) -> Option<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, (&on, &t)) in example.loss_mask.iter().zip(&example.target).enumerate() {
        if !on {
            continue;
        }
        let row = logits.row(i);
        let max = row.fold(F::neg_infinity(), |m, &x| m.max(x));
        let lse = max + row.fold(F::zero(), |acc, &x| acc + (x - max).exp()).ln();
        total += (lse - row[t as usize]).to_f64().expect("finite");
        count += 1;
    }
    (count > 0).then(|| total / count as f64)
}

/// Mean per-example loss over the examples that carry any loss, with the
/// gradient of every parameter tensor (canonical order). `None` if no
/// example has a loss position.
pub fn batch_loss_and_grads<F: Scalar>(
    params: &Parameters<F>,
    batch: &[TrainingExample],
) -> Result<Option<(f64, Vec<Array2<F>>)>, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for ex in batch {
        if ex.attention != params.config.attention {
            return Err(ModelError::AttentionMismatch {
                expected: params.config.attention.as_str(),
                found: ex.attention.as_str(),
            });
        }
    }
    let with_loss = batch.iter().filter(|ex| ex.loss_mask.iter().any(|&m| m)).count();
    if with_loss == 0 {
        return Ok(None);
    }
    let seqs: Vec<&[TokenId]> = batch.iter().map(|ex| ex.input.as_slice()).collect();
    let mut packed = run_packed(params, &seqs)?;
    let mut targets = Vec::new();
    let mut weights = Vec::new();
    for ex in batch {
        let count = ex.loss_mask.iter().filter(|&&m| m).count();
        let w = if count == 0 { 0.0 } else { 1.0 / (count * with_loss) as f64 };
        for (&on, &t) in ex.loss_mask.iter().zip(&ex.target) {
            targets.push(if on { t as usize } else { 0 });
            weights.push(if on { cast::<F>(w) } else { F::zero() });
        }
    }
    let loss = packed.tape.cross_entropy(packed.logits, &targets, &weights);
    let value = packed.tape.value(loss)[[0, 0]].to_f64().unwrap_or(f64::NAN);
    if !value.is_finite() {
        return Err(ModelError::NonFiniteLoss { loss: value });
    }
    let mut grads = packed.tape.backward(loss);
    let out = packed
        .params
        .iter()
        .zip(params.tensors())
        .map(|(&var, (_, t))| grads.take(var).unwrap_or_else(|| Array2::zeros(t.dim())))
        .collect();
    Ok(Some((value, out)))
}

/// One Adam update on the mean batch loss. Returns the pre-update loss, or
/// `None` (and leaves everything untouched) when the batch has no loss
/// positions.
pub fn grad_step<F: Scalar>(
    params: &mut Parameters<F>,
    batch: &[TrainingExample],
    state: &mut AdamState<F>,
    lr: f64,
) -> Result<Option<f64>, ModelError> {
    let Some((loss, grads)) = batch_loss_and_grads(params, batch)? else {
        return Ok(None);
    };
    state.update(params, &grads, lr);
    Ok(Some(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(attention: AttentionMode) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_mlp: 16,
            vocab_size: 11,
            max_seq_len: 6,
            attention,
            tie_embeddings: false,
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut cfg = tiny(AttentionMode::Causal);
        cfg.n_heads = 3;
        assert!(matches!(init::<f32>(&cfg, 0), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn tied_model_has_no_head_matrix() {
        let mut cfg = tiny(AttentionMode::Causal);
        cfg.tie_embeddings = true;
        let p = init::<f64>(&cfg, 3).unwrap();
        assert!(p.head_w.is_none());
        assert!(p.tensors().iter().all(|(n, _)| n != "head.w"));
        let (logits, _) = forward(&p, &[1, 2, 3], &[]).unwrap();
        assert_eq!(logits.dim(), (3, 11));
    }

    #[test]
    fn rejects_out_of_range_tokens_and_long_inputs() {
        let p = init::<f32>(&tiny(AttentionMode::Causal), 0).unwrap();
        assert!(matches!(forward(&p, &[1, 11], &[]), Err(ModelError::TokenOutOfRange { position: 1, .. })));
        assert!(matches!(forward(&p, &[1; 7], &[]), Err(ModelError::SequenceTooLong { .. })));
        assert!(matches!(forward(&p, &[], &[]), Err(ModelError::EmptySequence)));
        assert!(matches!(forward(&p, &[1, 2], &[2]), Err(ModelError::TracePosition { .. })));
    }

    #[test]
    fn trace_has_requested_positions_only() {
        let p = init::<f32>(&tiny(AttentionMode::Bidirectional), 1).unwrap();
        let (_, trace) = forward(&p, &[4, 5, 6, 7], &[1, 3]).unwrap();
        assert_eq!(trace.layers.len(), 2);
        assert!(trace.layers.iter().all(|a| a.dim() == (2, 16)));
        assert!(trace.get(0, 3).is_some());
        assert!(trace.get(0, 2).is_none());
    }

    #[test]
    fn packed_batch_matches_single_sequences() {
        let p = init::<f64>(&tiny(AttentionMode::Bidirectional), 2).unwrap();
        let seqs = vec![vec![1u32, 2, 3], vec![4u32], vec![5u32, 6, 7, 8]];
        let batched = forward_batch(&p, &seqs, &[]).unwrap();
        for (seq, (logits, _)) in seqs.iter().zip(&batched) {
            let (single, _) = forward(&p, seq, &[]).unwrap();
            for (a, b) in single.iter().zip(logits.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
