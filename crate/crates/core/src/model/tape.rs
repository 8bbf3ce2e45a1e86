//! Reverse-mode differentiation over dense matrices.
//!
//! Every value on the tape is a 2-D array; vectors are `1 x n` rows. Ops are
//! coarse (a whole matmul, a whole attention block) so the bookkeeping cost
//! stays negligible next to the arithmetic. A tape is built per forward pass
//! and consumed by [`Tape::backward`].

use std::fmt::{Debug, Display};
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView2, Axis, LinalgScalar, ScalarOperand, Zip};
use num_traits::{Float, FromPrimitive};

/// Element type the tape can differentiate through.
pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[inline]
pub(crate) fn cast<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("f64 is representable")
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row layout of sequences packed into one matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqLayout {
    offsets: Vec<usize>,
    lengths: Vec<usize>,
}

impl SeqLayout {
    pub fn from_lengths(lengths: &[usize]) -> Self {
        let mut offsets = Vec::with_capacity(lengths.len());
        let mut acc = 0;
        for &len in lengths {
            offsets.push(acc);
            acc += len;
        }
        Self { offsets, lengths: lengths.to_vec() }
    }

    pub fn total(&self) -> usize {
        self.offsets.last().map_or(0, |o| o + self.lengths[self.lengths.len() - 1])
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// `(row offset, length)` of every sequence.
    pub fn segments(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.offsets.iter().copied().zip(self.lengths.iter().copied())
    }

    /// Position of every packed row within its own sequence.
    pub fn positions(&self) -> Vec<usize> {
        self.lengths.iter().flat_map(|&len| 0..len).collect()
    }
}

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Array2<F>,
        inv_std: Vec<F>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<SeqLayout>,
        n_heads: usize,
        probs: Vec<Array2<F>>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<F>,
        probs: Array2<F>,
    },
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&Array2<F>> {
        self.grads[var.0].as_ref()
    }

    pub fn take(&mut self, var: Var) -> Option<Array2<F>> {
        self.grads[var.0].take()
    }
}

pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;
const LN_EPS: f64 = 1e-5;

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, var: Var) -> &Array2<F> {
        &self.nodes[var.0].value
    }

    pub fn leaf(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        self.push(value, Op::MatMulNt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1, "add_row expects a 1 x n row");
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let c = cast::<F>(GELU_C);
        let k = cast::<F>(GELU_A);
        let half = cast::<F>(0.5);
        let value = self
            .value(a)
            .mapv(|x| half * x * (F::one() + (c * (x + k * x * x * x)).tanh()));
        self.push(value, Op::Gelu(a))
    }

    /// Row-wise layer normalization with affine `1 x n` gamma and beta.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let input = self.value(x);
        let (rows, cols) = input.dim();
        let n = cast::<F>(cols as f64);
        let eps = cast::<F>(LN_EPS);
        let mut xhat = Array2::<F>::zeros((rows, cols));
        let mut inv_std = Vec::with_capacity(rows);
        for (r, row) in input.outer_iter().enumerate() {
            let mean = row.sum() / n;
            let var = row.fold(F::zero(), |acc, &v| acc + (v - mean) * (v - mean)) / n;
            let inv = F::one() / (var + eps).sqrt();
            inv_std.push(inv);
            Zip::from(xhat.row_mut(r)).and(&row).for_each(|h, &v| *h = (v - mean) * inv);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        self.push(value, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tbl = self.value(table);
        let cols = tbl.ncols();
        let mut value = Array2::<F>::zeros((ids.len(), cols));
        for (i, &id) in ids.iter().enumerate() {
            value.row_mut(i).assign(&tbl.row(id));
        }
        self.push(value, Op::Gather { table, ids: ids.to_vec() })
    }

    /// Multi-head scaled dot-product attention over packed sequences. Rows of
    /// different sequences never attend to each other; with `causal`, row `i`
    /// of a sequence attends only to rows `<= i`.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<SeqLayout>,
        n_heads: usize,
        causal: bool,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.dim();
        assert_eq!(rows, layout.total(), "attention layout does not cover the input");
        assert_eq!(d % n_heads, 0);
        let dh = d / n_heads;
        let scale = cast::<F>(1.0 / (dh as f64).sqrt());
        let mut out = Array2::<F>::zeros((rows, d));
        let mut probs = Vec::with_capacity(layout.len() * n_heads);
        for (start, len) in layout.segments() {
            for h in 0..n_heads {
                let cols = h * dh..(h + 1) * dh;
                let qs = qv.slice(s![start..start + len, cols.clone()]);
                let ks = kv.slice(s![start..start + len, cols.clone()]);
                let vs = vv.slice(s![start..start + len, cols.clone()]);
                let mut p = qs.dot(&ks.t());
                for (i, mut row) in p.outer_iter_mut().enumerate() {
                    let visible = if causal { i + 1 } else { len };
                    let mut max = F::neg_infinity();
                    for j in 0..visible {
                        row[j] = row[j] * scale;
                        max = max.max(row[j]);
                    }
                    let mut sum = F::zero();
                    for j in 0..visible {
                        row[j] = (row[j] - max).exp();
                        sum = sum + row[j];
                    }
                    for j in 0..len {
                        row[j] = if j < visible { row[j] / sum } else { F::zero() };
                    }
                }
                out.slice_mut(s![start..start + len, cols]).assign(&p.dot(&vs));
                probs.push(p);
            }
        }
        self.push(out, Op::Attention { q, k, v, layout, n_heads, probs })
    }

    /// Weighted token-level cross-entropy, returned as a `1 x 1` value.
    ///
    /// Row `i` contributes `weights[i] * -ln softmax(logits_i)[targets[i]]`;
    /// rows with zero weight are ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len());
        assert_eq!(lv.nrows(), weights.len());
        let probs = softmax_rows(lv.view());
        let mut total = F::zero();
        for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
            if w != F::zero() {
                let row = lv.row(i);
                let max = row.fold(F::neg_infinity(), |m, &x| m.max(x));
                let lse = max + row.fold(F::zero(), |acc, &x| acc + (x - max).exp()).ln();
                total = total + w * (lse - row[t]);
            }
        }
        let value = Array2::from_elem((1, 1), total);
        self.push(
            value,
            Op::CrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
        )
    }

    /// Back-propagates from the scalar node `loss` (seeded with 1).
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), F::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulNt(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *row, gr);
                    accumulate(&mut grads, *a, g);
                }
                Op::Gelu(a) => {
                    let c = cast::<F>(GELU_C);
                    let k = cast::<F>(GELU_A);
                    let half = cast::<F>(0.5);
                    let three = cast::<F>(3.0);
                    let mut ga = g;
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        let inner = c * (x + k * x * x * x);
                        let t = inner.tanh();
                        let dinner = c * (F::one() + three * k * x * x);
                        let d = half * (F::one() + t) + half * x * (F::one() - t * t) * dinner;
                        *gv = *gv * d;
                    });
                    accumulate(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = self.value(*gamma);
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * gv;
                    let cols = dxhat.ncols();
                    let n = cast::<F>(cols as f64);
                    let mut gx = Array2::<F>::zeros(dxhat.dim());
                    for r in 0..dxhat.nrows() {
                        let dr = dxhat.row(r);
                        let hr = xhat.row(r);
                        let sum_d = dr.sum();
                        let sum_dh = dr.dot(&hr);
                        let inv = inv_std[r] / n;
                        Zip::from(gx.row_mut(r)).and(&dr).and(&hr).for_each(|o, &d, &h| {
                            *o = inv * (n * d - sum_d - h * sum_dh);
                        });
                    }
                    accumulate(&mut grads, *gamma, ggamma);
                    accumulate(&mut grads, *beta, gbeta);
                    accumulate(&mut grads, *x, gx);
                }
                Op::Gather { table, ids } => {
                    let mut gt = Array2::<F>::zeros(self.value(*table).dim());
                    for (i, &id) in ids.iter().enumerate() {
                        let mut dst = gt.row_mut(id);
                        dst += &g.row(i);
                    }
                    accumulate(&mut grads, *table, gt);
                }
                Op::Attention { q, k, v, layout, n_heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / n_heads;
                    let scale = cast::<F>(1.0 / (dh as f64).sqrt());
                    let mut gq = Array2::<F>::zeros(qv.dim());
                    let mut gk = Array2::<F>::zeros(kv.dim());
                    let mut gvv = Array2::<F>::zeros(vv.dim());
                    let mut p_iter = probs.iter();
                    for (start, len) in layout.segments() {
                        for h in 0..*n_heads {
                            let p = p_iter.next().expect("one probability block per segment and head");
                            let rows = start..start + len;
                            let cols = h * dh..(h + 1) * dh;
                            let go = g.slice(s![rows.clone(), cols.clone()]);
                            let qs = qv.slice(s![rows.clone(), cols.clone()]);
                            let ks = kv.slice(s![rows.clone(), cols.clone()]);
                            let vs = vv.slice(s![rows.clone(), cols.clone()]);
                            gvv.slice_mut(s![rows.clone(), cols.clone()]).assign(&p.t().dot(&go));
                            let mut ds = go.dot(&vs.t());
                            for (mut drow, prow) in ds.outer_iter_mut().zip(p.outer_iter()) {
                                let dot = drow.dot(&prow);
                                Zip::from(&mut drow).and(&prow).for_each(|dv, &pv| {
                                    *dv = pv * (*dv - dot) * scale;
                                });
                            }
                            gq.slice_mut(s![rows.clone(), cols.clone()]).assign(&ds.dot(&ks));
                            gk.slice_mut(s![rows, cols]).assign(&ds.t().dot(&qs));
                        }
                    }
                    accumulate(&mut grads, *q, gq);
                    accumulate(&mut grads, *k, gk);
                    accumulate(&mut grads, *v, gvv);
                }
                Op::CrossEntropy { logits, targets, weights, probs } => {
                    let upstream = g[[0, 0]];
                    let mut gl = Array2::<F>::zeros(probs.dim());
                    for (i, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == F::zero() {
                            continue;
                        }
                        let scale = w * upstream;
                        let mut row = gl.row_mut(i);
                        Zip::from(&mut row).and(&probs.row(i)).for_each(|o, &p| *o = p * scale);
                        row[t] = row[t] - scale;
                    }
                    accumulate(&mut grads, *logits, gl);
                }
            }
        }
        Gradients { grads }
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Array2<F>>], var: Var, g: Array2<F>) {
    match &mut grads[var.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<F: Scalar>(logits: ArrayView2<'_, F>) -> Array2<F> {
    let mut out = logits.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(F::neg_infinity(), |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|x| x / sum);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(f: impl Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let h = 1e-5;
        let mut g = Array2::zeros(x.dim());
        for idx in 0..x.len() {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp.as_slice_mut().unwrap()[idx] += h;
            xm.as_slice_mut().unwrap()[idx] -= h;
            g.as_slice_mut().unwrap()[idx] = (f(&xp) - f(&xm)) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())), "{x} vs {y}");
        }
    }

    #[test]
    fn layout_positions_restart_per_sequence() {
        let layout = SeqLayout::from_lengths(&[3, 1, 2]);
        assert_eq!(layout.total(), 6);
        assert_eq!(layout.positions(), vec![0, 1, 2, 0, 0, 1]);
        assert_eq!(layout.segments().collect::<Vec<_>>(), vec![(0, 3), (3, 1), (4, 2)]);
    }

    #[test]
    fn gelu_matches_finite_differences() {
        let x = array![[-2.0, -0.3, 0.0, 0.7, 3.1]];
        let w = array![[0.5, -1.0, 2.0, 0.25, 1.5]];
        let loss_of = |xv: &Array2<f64>| {
            let mut t = Tape::new();
            let a = t.leaf(xv.clone());
            let g = t.gelu(a);
            (t.value(g) * &w).sum()
        };
        let mut t = Tape::new();
        let a = t.leaf(x.clone());
        let g = t.gelu(a);
        let wv = t.leaf(w.t().to_owned());
        let out = t.matmul(g, wv);
        let grads = t.backward(out);
        assert_close(grads.get(a).unwrap(), &numeric_grad(loss_of, &x), 1e-7);
    }

    #[test]
    fn cross_entropy_ignores_zero_weight_rows() {
        let mut t = Tape::new();
        let logits = t.leaf(array![[1.0, 2.0, 3.0], [5.0, -1.0, 0.0]]);
        let loss = t.cross_entropy(logits, &[2, 0], &[1.0, 0.0]);
        let expected = -(3.0f64.exp() / (1.0f64.exp() + 2.0f64.exp() + 3.0f64.exp())).ln();
        assert!((t.value(loss)[[0, 0]] - expected).abs() < 1e-12);
        let grads = t.backward(loss);
        let g = grads.get(logits).unwrap();
        assert_eq!(g.row(1).to_vec(), vec![0.0, 0.0, 0.0]);
        assert!(g.row(0).sum().abs() < 1e-12);
    }

    #[test]
    fn causal_attention_ignores_future_rows() {
        let layout = Arc::new(SeqLayout::from_lengths(&[3]));
        let q = array![[0.1, 0.2], [0.3, -0.1], [0.5, 0.5]];
        let mut v = array![[1.0, 0.0], [0.0, 1.0], [2.0, 2.0]];
        let run = |v: &Array2<f64>| {
            let mut t = Tape::new();
            let (qv, kv, vv) = (t.leaf(q.clone()), t.leaf(q.clone()), t.leaf(v.clone()));
            let out = t.attention(qv, kv, vv, layout.clone(), 1, true);
            t.value(out).clone()
        };
        let before = run(&v);
        v[[2, 0]] = 100.0;
        let after = run(&v);
        assert_eq!(before.row(0), after.row(0));
        assert_eq!(before.row(1), after.row(1));
        assert_ne!(before.row(2), after.row(2));
    }
}
