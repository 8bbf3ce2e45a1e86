//! Answer-slot activation analysis: cosine distances between related facts
//! and linear probes on difference vectors.
//!
//! States are the MLP post-GELU activations at the answer slot: the last
//! prompt token for decoders (`A r`, `B r'`) and the `[MASK]` position for
//! MLM (`A r [MASK]`, `B r' [MASK]`). The unmasked control is the state at
//! the answer token of the full sequence `A r B`.

use std::collections::HashMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{reverse_fact, Direction, Fact, TokenId, Vocab};
use crate::model::{self, ModelError, Parameters};
use crate::objectives::Objective;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("no anchor has a {0} partner")]
    EmptyReference(ReferenceKind),
    #[error("need {need} facts with a partner, found {have}")]
    InsufficientFacts { need: usize, have: usize },
    #[error("probe did not converge after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence { iterations: usize, grad_norm: f64 },
    #[error("layer {layer} is out of range for {n_layers} layers")]
    Layer { layer: usize, n_layers: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryState {
    AnswerSlotMasked,
    AnswerSlotUnmasked,
}

/// Which decoder state stands for a fact in the masked-query slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderAnchor {
    /// Last token of the prompt `A r`.
    #[default]
    Prompt,
    /// Answer token of the full sequence `A r B`.
    FullSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationRecord {
    /// Index into the fact list given to [`extract_states`].
    pub fact_id: usize,
    pub direction: Direction,
    pub layer: usize,
    pub query: QueryState,
    pub vector: Vec<f32>,
}

fn query_tokens(fact: &Fact, direction: Direction, vocab: &Vocab) -> [TokenId; 3] {
    match direction {
        Direction::Forward => fact.tokens(),
        Direction::Reverse => reverse_fact(fact, vocab).tokens(),
    }
}

/// Extracts answer-slot states for both directions of every (forward) fact,
/// for every layer and both query states.
pub fn extract_states(
    params: &Parameters<f32>,
    facts: &[Fact],
    objective: Objective,
    vocab: &Vocab,
    anchor: DecoderAnchor,
) -> Result<Vec<ActivationRecord>, AnalysisError> {
    let mut seqs: Vec<Vec<TokenId>> = Vec::new();
    let mut traced: Vec<usize> = Vec::new();
    let mut keys: Vec<(usize, Direction, QueryState)> = Vec::new();
    for (id, fact) in facts.iter().enumerate() {
        for direction in [Direction::Forward, Direction::Reverse] {
            let [first, relation, answer] = query_tokens(fact, direction, vocab);
            let masked = match (objective, anchor) {
                (Objective::Mlm, _) => (vec![first, relation, vocab.mask], 2),
                (_, DecoderAnchor::Prompt) => (vec![first, relation], 1),
                (_, DecoderAnchor::FullSequence) => (vec![first, relation, answer], 2),
            };
            seqs.push(masked.0);
            traced.push(masked.1);
            keys.push((id, direction, QueryState::AnswerSlotMasked));
            seqs.push(vec![first, relation, answer]);
            traced.push(2);
            keys.push((id, direction, QueryState::AnswerSlotUnmasked));
        }
    }
    let n_layers = params.config.n_layers;
    let mut records = Vec::with_capacity(seqs.len() * n_layers);
    for start in (0..seqs.len()).step_by(256) {
        let end = (start + 256).min(seqs.len());
        let positions: Vec<Vec<usize>> = traced[start..end].iter().map(|&p| vec![p]).collect();
        let outputs = model::forward_batch(params, &seqs[start..end], &positions)?;
        for ((_, trace), &(fact_id, direction, query)) in outputs.iter().zip(&keys[start..end]) {
            for layer in 0..n_layers {
                records.push(ActivationRecord {
                    fact_id,
                    direction,
                    layer,
                    query,
                    vector: trace.layers[layer].row(0).to_vec(),
                });
            }
        }
    }
    Ok(records)
}

/// Lookup of records by (fact, direction, layer, query state).
pub struct StateIndex<'a> {
    records: &'a [ActivationRecord],
    by_key: HashMap<(usize, Direction, usize, QueryState), usize>,
    n_layers: usize,
}

impl<'a> StateIndex<'a> {
    pub fn new(records: &'a [ActivationRecord]) -> Self {
        let by_key = records
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.fact_id, r.direction, r.layer, r.query), i))
            .collect();
        let n_layers = records.iter().map(|r| r.layer + 1).max().unwrap_or(0);
        Self { records, by_key, n_layers }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn get(&self, fact_id: usize, direction: Direction, layer: usize, query: QueryState) -> Option<&'a [f32]> {
        let i = *self.by_key.get(&(fact_id, direction, layer, query))?;
        Some(&self.records[i].vector)
    }

    fn has(&self, fact_id: usize) -> bool {
        self.by_key.contains_key(&(fact_id, Direction::Forward, 0, QueryState::AnswerSlotMasked))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReferenceKind {
    ReverseFact,
    SameSource,
    SameRelation,
    Unrelated,
    MaskedVsUnmasked,
}

impl ReferenceKind {
    pub const ALL: [ReferenceKind; 5] = [
        ReferenceKind::ReverseFact,
        ReferenceKind::SameSource,
        ReferenceKind::SameRelation,
        ReferenceKind::Unrelated,
        ReferenceKind::MaskedVsUnmasked,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ReferenceKind::ReverseFact => "reverse_fact",
            ReferenceKind::SameSource => "same_source",
            ReferenceKind::SameRelation => "same_relation",
            ReferenceKind::Unrelated => "unrelated",
            ReferenceKind::MaskedVsUnmasked => "masked_vs_unmasked",
        }
    }
}

impl fmt::Display for ReferenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ReferenceKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown reference kind `{s}`"))
    }
}

/// Control sets for the probes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlKind {
    SameSource,
    SameRelation,
    Unrelated,
}

impl ControlKind {
    pub const ALL: [ControlKind; 3] = [ControlKind::SameSource, ControlKind::SameRelation, ControlKind::Unrelated];

    pub fn as_str(self) -> &'static str {
        ReferenceKind::from(self).as_str()
    }
}

impl From<ControlKind> for ReferenceKind {
    fn from(c: ControlKind) -> Self {
        match c {
            ControlKind::SameSource => ReferenceKind::SameSource,
            ControlKind::SameRelation => ReferenceKind::SameRelation,
            ControlKind::Unrelated => ReferenceKind::Unrelated,
        }
    }
}

impl fmt::Display for ControlKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ControlKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| format!("unknown control kind `{s}`"))
    }
}

/// Whether `other` stands in relation `kind` to `anchor`. The self-paired
/// kinds hold only for the anchor itself.
pub fn is_partner(kind: ReferenceKind, anchor: &Fact, other: &Fact) -> bool {
    match kind {
        ReferenceKind::ReverseFact | ReferenceKind::MaskedVsUnmasked => anchor == other,
        ReferenceKind::SameSource => other != anchor && other.source == anchor.source,
        ReferenceKind::SameRelation => other != anchor && other.relation == anchor.relation,
        ReferenceKind::Unrelated => {
            let shared = [other.source, other.target]
                .iter()
                .any(|e| *e == anchor.source || *e == anchor.target);
            !shared && other.relation != anchor.relation
        }
    }
}

fn partners(kind: ReferenceKind, facts: &[Fact], anchor: usize, pool: &[usize]) -> Vec<usize> {
    pool.iter().copied().filter(|&j| is_partner(kind, &facts[anchor], &facts[j])).collect()
}

/// Which record the partner of an anchor is read from.
fn partner_state(kind: ReferenceKind) -> (Direction, QueryState) {
    match kind {
        ReferenceKind::ReverseFact => (Direction::Reverse, QueryState::AnswerSlotMasked),
        ReferenceKind::MaskedVsUnmasked => (Direction::Forward, QueryState::AnswerSlotUnmasked),
        _ => (Direction::Forward, QueryState::AnswerSlotMasked),
    }
}

/// `1 - cos(a, b)`, in `[0, 2]`. A zero vector is at distance 1 from
/// everything.
pub fn cosine_distance(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na * nb).sqrt()).clamp(0.0, 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub layer: usize,
    pub kind: ReferenceKind,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

/// Per-layer mean and sample std of the cosine distance between `n_facts`
/// sampled anchors (forward facts, masked query) and their `kind` partner.
pub fn mean_cosine_distance(
    facts: &[Fact],
    records: &[ActivationRecord],
    kind: ReferenceKind,
    n_facts: usize,
    seed: u64,
) -> Result<Vec<DistanceRow>, AnalysisError> {
    let index = StateIndex::new(records);
    let pool: Vec<usize> = (0..facts.len()).filter(|&i| index.has(i)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let eligible: Vec<(usize, Vec<usize>)> = pool
        .iter()
        .map(|&a| (a, partners(kind, facts, a, &pool)))
        .filter(|(_, p)| !p.is_empty())
        .collect();
    if eligible.is_empty() {
        return Err(AnalysisError::EmptyReference(kind));
    }
    if eligible.len() < n_facts {
        return Err(AnalysisError::InsufficientFacts { need: n_facts, have: eligible.len() });
    }
    let pairs: Vec<(usize, usize)> = index::sample(&mut rng, eligible.len(), n_facts)
        .into_iter()
        .map(|i| {
            let (anchor, candidates) = &eligible[i];
            (*anchor, candidates[rng.random_range(0..candidates.len())])
        })
        .collect();
    let (other_dir, other_query) = partner_state(kind);
    let mut rows = Vec::with_capacity(index.n_layers());
    for layer in 0..index.n_layers() {
        let d: Vec<f64> = pairs
            .iter()
            .map(|&(a, o)| {
                let va = index.get(a, Direction::Forward, layer, QueryState::AnswerSlotMasked).expect("indexed");
                let vo = index.get(o, other_dir, layer, other_query).expect("extracted in pairs");
                cosine_distance(va, vo)
            })
            .collect();
        let (mean, std) = mean_std(&d);
        rows.push(DistanceRow { layer, kind, mean, std, n: d.len() });
    }
    Ok(rows)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeLabel {
    ReversalPair,
    ControlPair,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeExample {
    pub delta: Vec<f64>,
    pub label: ProbeLabel,
    pub anchor: usize,
    pub other: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub examples: Vec<ProbeExample>,
    pub control_kind: ControlKind,
    pub layer: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

impl ProbeDataset {
    pub fn dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.delta.len())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSplit {
    pub train_fraction: f64,
    /// Upper bound on anchors per dataset; `None` uses every eligible fact.
    pub max_anchors: Option<usize>,
}

impl Default for ProbeSplit {
    fn default() -> Self {
        Self { train_fraction: 0.7, max_anchors: Some(400) }
    }
}

/// Difference vectors `fact - reverse(fact)` (reversal pairs) and
/// `fact - control` (control pairs) at one layer. Facts are split 70/30
/// before pairing and partners are drawn from the anchor's own split, so no
/// fact feeds both splits. Every kept anchor yields one example of each
/// class. The pairing depends only on `seed`, not on `layer`.
pub fn build_probe_dataset(
    facts: &[Fact],
    records: &[ActivationRecord],
    control_kind: ControlKind,
    layer: usize,
    split: ProbeSplit,
    seed: u64,
) -> Result<ProbeDataset, AnalysisError> {
    let index = StateIndex::new(records);
    if layer >= index.n_layers() {
        return Err(AnalysisError::Layer { layer, n_layers: index.n_layers() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pool: Vec<usize> = (0..facts.len()).filter(|&i| index.has(i)).collect();
    pool.shuffle(&mut rng);
    let n_train = ((pool.len() as f64) * split.train_fraction).round() as usize;
    let (train_pool, test_pool) = pool.split_at(n_train.min(pool.len()));

    let kind = ReferenceKind::from(control_kind);
    let state = |fact: usize, dir: Direction| -> Vec<f64> {
        index
            .get(fact, dir, layer, QueryState::AnswerSlotMasked)
            .expect("indexed")
            .iter()
            .map(|&v| v as f64)
            .collect()
    };
    let mut examples = Vec::new();
    let mut sides: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (side, part) in [train_pool, test_pool].into_iter().enumerate() {
        let cap = split
            .max_anchors
            .map(|m| ((m as f64) * if side == 0 { split.train_fraction } else { 1.0 - split.train_fraction }).round() as usize)
            .unwrap_or(usize::MAX);
        let mut kept = 0;
        for &anchor in part {
            if kept >= cap {
                break;
            }
            let candidates = partners(kind, facts, anchor, part);
            if candidates.is_empty() {
                continue;
            }
            let other = candidates[rng.random_range(0..candidates.len())];
            let a = state(anchor, Direction::Forward);
            let diff = |b: Vec<f64>| a.iter().zip(&b).map(|(x, y)| x - y).collect::<Vec<f64>>();
            sides[side].push(examples.len());
            examples.push(ProbeExample {
                delta: diff(state(anchor, Direction::Reverse)),
                label: ProbeLabel::ReversalPair,
                anchor,
                other: anchor,
            });
            sides[side].push(examples.len());
            examples.push(ProbeExample {
                delta: diff(state(other, Direction::Forward)),
                label: ProbeLabel::ControlPair,
                anchor,
                other,
            });
            kept += 1;
        }
    }
    let [train, test] = sides;
    let have = train.len().min(test.len()) / 2;
    if have < 2 {
        return Err(AnalysisError::InsufficientFacts { need: 2, have });
    }
    Ok(ProbeDataset { examples, control_kind, layer, train, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// Ridge strengths tried; the one with the best validation accuracy wins,
    /// ties going to `default_lambda`.
    pub lambdas: Vec<f64>,
    pub default_lambda: f64,
    /// Per-dimension z-scoring fit on the training split.
    pub standardize: bool,
    /// Share of training anchors held back for choosing lambda.
    pub validation_fraction: f64,
    pub max_iter: usize,
    pub tolerance: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![1e-3, 1e-2, 1e-1],
            default_lambda: 1e-2,
            standardize: true,
            validation_fraction: 0.2,
            max_iter: 100,
            tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeFit {
    pub test_accuracy: f64,
    pub lambda: f64,
    /// Weights in standardized coordinates when standardization is on.
    pub weights: Vec<f64>,
    /// (lambda, validation accuracy) for every grid value.
    pub grid: Vec<(f64, f64)>,
}

fn label_value(l: ProbeLabel) -> f64 {
    match l {
        ProbeLabel::ReversalPair => 1.0,
        ProbeLabel::ControlPair => 0.0,
    }
}

struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(rows: &[&[f64]], enabled: bool) -> Self {
        let d = rows.first().map_or(0, |r| r.len());
        if !enabled {
            return Self { mean: vec![0.0; d], scale: vec![1.0; d] };
        }
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m).powi(2) / n;
            }
        }
        let scale = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, scale }
    }

    fn matrix(&self, rows: &[&[f64]]) -> DMatrix<f64> {
        let d = self.mean.len();
        DMatrix::from_fn(rows.len(), d, |i, j| (rows[i][j] - self.mean[j]) / self.scale[j])
    }
}

/// Bias-free L2 logistic regression by Newton's method on
/// `mean(log(1 + exp(-s_i w.x_i))) + lambda/2 |w|^2`.
pub fn fit_logistic(
    x: &DMatrix<f64>,
    y: &[f64],
    lambda: f64,
    max_iter: usize,
    tolerance: f64,
) -> Result<DVector<f64>, AnalysisError> {
    let (n, d) = x.shape();
    let nf = n as f64;
    let mut w = DVector::<f64>::zeros(d);
    let yv = DVector::from_column_slice(y);
    let mut grad_norm = f64::INFINITY;
    for _ in 0..max_iter {
        let z = x * &w;
        let p = z.map(sigmoid);
        let grad = x.transpose() * (&p - &yv) / nf + &w * lambda;
        grad_norm = grad.norm();
        if grad_norm < tolerance {
            return Ok(w);
        }
        let weights = p.map(|v| (v * (1.0 - v)).max(1e-12) / nf);
        let mut xw = x.clone();
        for (mut row, &s) in xw.row_iter_mut().zip(weights.iter()) {
            row *= s;
        }
        let mut h = x.transpose() * xw;
        for i in 0..d {
            h[(i, i)] += lambda;
        }
        let step = match h.cholesky() {
            Some(c) => c.solve(&grad),
            None => return Err(AnalysisError::NonConvergence { iterations: 0, grad_norm }),
        };
        w -= step;
    }
    let p = (x * &w).map(sigmoid);
    let grad = x.transpose() * (&p - &yv) / nf + &w * lambda;
    grad_norm = grad.norm().min(grad_norm);
    if grad_norm < tolerance.sqrt() {
        return Ok(w);
    }
    Err(AnalysisError::NonConvergence { iterations: max_iter, grad_norm })
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn accuracy_of(x: &DMatrix<f64>, y: &[f64], w: &DVector<f64>) -> f64 {
    let z = x * w;
    let correct = z.iter().zip(y).filter(|(s, &t)| (**s > 0.0) == (t > 0.5)).count();
    correct as f64 / y.len().max(1) as f64
}

/// Fits the probe on `train` and scores it on `test`, with labels `labels`
/// (0/1 per example).
fn fit_and_score(
    ds: &ProbeDataset,
    labels: &[f64],
    cfg: &ProbeConfig,
    lambda: Option<f64>,
) -> Result<ProbeFit, AnalysisError> {
    let rows = |ids: &[usize]| -> Vec<&[f64]> { ids.iter().map(|&i| ds.examples[i].delta.as_slice()).collect() };
    let ys = |ids: &[usize]| -> Vec<f64> { ids.iter().map(|&i| labels[i]).collect() };

    let mut grid = Vec::new();
    let lambda = match lambda {
        Some(l) => l,
        None => {
            // Hold back whole anchors so validation stays fact-disjoint.
            let mut anchors: Vec<usize> = ds.train.iter().map(|&i| ds.examples[i].anchor).collect();
            anchors.dedup();
            let n_val = ((anchors.len() as f64) * cfg.validation_fraction).round().max(1.0) as usize;
            let held: std::collections::HashSet<usize> = anchors[anchors.len() - n_val..].iter().copied().collect();
            let (val, fit): (Vec<usize>, Vec<usize>) =
                ds.train.iter().partition(|&&i| held.contains(&ds.examples[i].anchor));
            let fit_rows = rows(&fit);
            let st = Standardizer::fit(&fit_rows, cfg.standardize);
            let xf = st.matrix(&fit_rows);
            let xv = st.matrix(&rows(&val));
            let (yf, yv) = (ys(&fit), ys(&val));
            let mut best = (f64::NEG_INFINITY, cfg.default_lambda);
            for &l in &cfg.lambdas {
                let w = fit_logistic(&xf, &yf, l, cfg.max_iter, cfg.tolerance)?;
                let acc = accuracy_of(&xv, &yv, &w);
                grid.push((l, acc));
                let better = acc > best.0 || (acc == best.0 && l == cfg.default_lambda);
                if better {
                    best = (acc, l);
                }
            }
            best.1
        }
    };
    let train_rows = rows(&ds.train);
    let st = Standardizer::fit(&train_rows, cfg.standardize);
    let w = fit_logistic(&st.matrix(&train_rows), &ys(&ds.train), lambda, cfg.max_iter, cfg.tolerance)?;
    let test_accuracy = accuracy_of(&st.matrix(&rows(&ds.test)), &ys(&ds.test), &w);
    Ok(ProbeFit { test_accuracy, lambda, weights: w.iter().copied().collect(), grid })
}

/// Trains the probe on the training split and reports held-out accuracy.
pub fn train_probe(ds: &ProbeDataset, cfg: &ProbeConfig) -> Result<ProbeFit, AnalysisError> {
    let labels: Vec<f64> = ds.examples.iter().map(|e| label_value(e.label)).collect();
    fit_and_score(ds, &labels, cfg, None)
}

/// Test accuracies of the probe refit (at fixed `lambda`) on label-shuffled
/// copies of the dataset.
pub fn permutation_null(
    ds: &ProbeDataset,
    cfg: &ProbeConfig,
    lambda: f64,
    n_shuffles: usize,
    seed: u64,
) -> Result<Vec<f64>, AnalysisError> {
    let base: Vec<f64> = ds.examples.iter().map(|e| label_value(e.label)).collect();
    (0..n_shuffles)
        .map(|s| {
            let labels = shuffled(&base, seed, s);
            Ok(fit_and_score(ds, &labels, cfg, Some(lambda))?.test_accuracy)
        })
        .collect()
}

fn shuffled(base: &[f64], seed: u64, shuffle: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (shuffle as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let mut labels = base.to_vec();
    labels.shuffle(&mut rng);
    labels
}

/// Linear-interpolated percentile, `q` in `[0, 100]`.
pub fn percentile(xs: &[f64], q: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q / 100.0 * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    /// `None` for the max-over-layers summary.
    pub layer: Option<usize>,
    pub control_kind: ControlKind,
    pub accuracy: f64,
    pub null_low: f64,
    pub null_high: f64,
    pub lambda: Option<f64>,
}

impl ProbeRow {
    pub fn inside_null(&self) -> bool {
        self.null_low <= self.accuracy && self.accuracy <= self.null_high
    }

    pub fn above_null(&self) -> bool {
        self.accuracy > self.null_high
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    pub probe: ProbeConfig,
    pub split: ProbeSplit,
    pub n_shuffles: usize,
    /// Null band percentiles.
    pub band: (f64, f64),
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { probe: ProbeConfig::default(), split: ProbeSplit::default(), n_shuffles: 100, band: (2.5, 97.5) }
    }
}

/// Probes every layer for one control kind, plus a max-over-layers row whose
/// null applies the same shuffle to every layer and takes the max.
pub fn probe_layers(
    facts: &[Fact],
    records: &[ActivationRecord],
    control_kind: ControlKind,
    opts: &ProbeOptions,
    seed: u64,
) -> Result<Vec<ProbeRow>, AnalysisError> {
    let n_layers = StateIndex::new(records).n_layers();
    let mut rows = Vec::with_capacity(n_layers + 1);
    let mut nulls: Vec<Vec<f64>> = Vec::with_capacity(n_layers);
    for layer in 0..n_layers {
        let ds = build_probe_dataset(facts, records, control_kind, layer, opts.split, seed)?;
        let fit = train_probe(&ds, &opts.probe)?;
        let null = permutation_null(&ds, &opts.probe, fit.lambda, opts.n_shuffles, seed)?;
        rows.push(ProbeRow {
            layer: Some(layer),
            control_kind,
            accuracy: fit.test_accuracy,
            null_low: percentile(&null, opts.band.0),
            null_high: percentile(&null, opts.band.1),
            lambda: Some(fit.lambda),
        });
        nulls.push(null);
    }
    if n_layers > 0 {
        let max_null: Vec<f64> = (0..opts.n_shuffles)
            .map(|s| nulls.iter().map(|n| n[s]).fold(f64::NEG_INFINITY, f64::max))
            .collect();
        rows.push(ProbeRow {
            layer: None,
            control_kind,
            accuracy: rows.iter().map(|r| r.accuracy).fold(f64::NEG_INFINITY, f64::max),
            null_low: percentile(&max_null, opts.band.0),
            null_high: percentile(&max_null, opts.band.1),
            lambda: None,
        });
    }
    Ok(rows)
}

pub const DISTANCES_HEADER: [&str; 5] = ["layer", "kind", "mean", "std", "n"];
pub const PROBES_HEADER: [&str; 5] = ["layer", "control_kind", "accuracy", "null_low", "null_high"];

pub fn write_distances(path: &Path, rows: &[DistanceRow]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(DISTANCES_HEADER)?;
    for r in rows {
        w.write_record([
            r.layer.to_string(),
            r.kind.to_string(),
            format!("{:.6}", r.mean),
            format!("{:.6}", r.std),
            r.n.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_probes(path: &Path, rows: &[ProbeRow]) -> Result<(), AnalysisError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(PROBES_HEADER)?;
    for r in rows {
        w.write_record([
            r.layer.map_or("max".to_string(), |l| l.to_string()),
            r.control_kind.to_string(),
            format!("{:.6}", r.accuracy),
            format!("{:.6}", r.null_low),
            format!("{:.6}", r.null_high),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a JSON dump of the records, one per line.
pub fn write_records(path: &Path, records: &[ActivationRecord]) -> Result<(), AnalysisError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut f, r).map_err(std::io::Error::other)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_distance_edge_cases() {
        assert!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]).abs() < 1e-15);
        assert!((cosine_distance(&[1.0, 0.0], &[0.0, 3.0]) - 1.0).abs() < 1e-12);
        assert!((cosine_distance(&[1.0, 1.0], &[-2.0, -2.0]) - 2.0).abs() < 1e-12);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
    }

    #[test]
    fn percentile_interpolates() {
        let xs: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        assert_eq!(percentile(&xs, 2.5), 2.5);
        assert_eq!(percentile(&xs, 50.0), 50.0);
        assert_eq!(percentile(&[3.0], 97.5), 3.0);
    }

    #[test]
    fn partner_relations() {
        let f = |s, r, t| Fact::forward(s, r, t);
        let a = f(10, 100, 11);
        assert!(is_partner(ReferenceKind::SameSource, &a, &f(10, 101, 12)));
        assert!(!is_partner(ReferenceKind::SameSource, &a, &a));
        assert!(is_partner(ReferenceKind::SameRelation, &a, &f(12, 100, 13)));
        assert!(is_partner(ReferenceKind::Unrelated, &a, &f(12, 101, 13)));
        assert!(!is_partner(ReferenceKind::Unrelated, &a, &f(11, 101, 13)));
        assert!(!is_partner(ReferenceKind::Unrelated, &a, &f(12, 100, 13)));
        assert!(is_partner(ReferenceKind::ReverseFact, &a, &a));
    }

    #[test]
    fn logistic_separates_separable_data() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 0.2, 2.0, -0.1, -1.0, 0.3, -1.5, -0.2]);
        let y = [1.0, 1.0, 0.0, 0.0];
        let w = fit_logistic(&x, &y, 1e-2, 100, 1e-10).unwrap();
        assert_eq!(accuracy_of(&x, &y, &w), 1.0);
    }
}
