//! Training loops and behavioural evaluation.
//!
//! Evaluation prompts carry no affixes and no special tokens except the
//! `[MASK]` an MLM needs:
//!
//! | query       | decoder prompt | MLM prompt          | correct answer |
//! |-------------|----------------|---------------------|----------------|
//! | reversal    | `B r'`         | `B r' [MASK]`       | `A`            |
//! | forward     | `A r`          | `A r [MASK]`        | `B`            |
//! | false frame | `B r`          | `B r [MASK]`        | `A` (wrongly)  |
//!
//! Predictions are the argmax over the whole vocabulary; credit is exact
//! match on the single entity token.

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{reverse_fact, Corpus, Document, Fact, TokenId};
use crate::model::{self, AdamConfig, AdamState, Checkpoint, ModelConfig, ModelError, Parameters};
use crate::objectives::{
    ablation_policy, build_mlm, build_ntp, build_ntp_masking, enumerate_sweep_policies,
    AblationKind, MaskingPolicy, Objective, ObjectiveError, TrainingExample,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("run config: {0}")]
    Config(String),
    #[error("corpus leaks {0} held-out reverse facts into training")]
    Leakage(usize),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("no held-out facts to evaluate")]
    NoHeldout,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    /// Linear warmup, then constant.
    Constant,
    /// Linear warmup, then linear decay to 10% of the peak.
    Linear,
}

/// Stop once the forward held-out accuracy has saturated and the training
/// loss has stopped improving.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyStop {
    pub check_every: usize,
    /// Forward accuracy that counts as saturated.
    pub forward_accuracy: f64,
    /// Relative improvement of the mean loss between consecutive windows
    /// below which the loss counts as plateaued.
    pub min_improvement: f64,
}

impl Default for EarlyStop {
    fn default() -> Self {
        Self { check_every: 1000, forward_accuracy: 1.0, min_improvement: 0.01 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub objective: Objective,
    /// Ignored by NTP.
    pub policy: MaskingPolicy,
    pub model: ModelConfig,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    /// NTP+Masking only: probability that a sampled document is emitted as
    /// the plain unmasked sequence instead of `masked [SEP] doc`.
    pub plain_fraction: f64,
    pub adam: AdamConfig,
    pub early_stop: Option<EarlyStop>,
}

impl RunConfig {
    /// Defaults for a from-scratch run on `corpus`: standard 4-layer model,
    /// 30k steps of batch 64 at lr 1e-3 with 1% warmup.
    pub fn standard(objective: Objective, corpus: &Corpus) -> Self {
        let max_len = required_seq_len(objective, corpus.max_doc_len().max(3));
        Self {
            objective,
            policy: MaskingPolicy::standard(),
            model: ModelConfig::standard(corpus.vocab.size(), max_len, objective.attention()),
            steps: 30_000,
            batch_size: 64,
            lr: 1e-3,
            warmup_frac: 0.01,
            schedule: LrSchedule::Constant,
            seed: 0,
            plain_fraction: 0.5,
            adam: AdamConfig::default(),
            early_stop: Some(EarlyStop::default()),
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        self.model.validate()?;
        if self.model.attention != self.objective.attention() {
            return Err(TrainError::Config(format!(
                "{} needs {} attention",
                self.objective,
                self.objective.attention().as_str()
            )));
        }
        if self.objective != Objective::Ntp {
            self.policy.validate()?;
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.plain_fraction) {
            return Err(TrainError::Config("plain_fraction must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn with_policy(&self, policy: MaskingPolicy) -> Self {
        Self { policy, ..self.clone() }
    }

    pub fn with_objective(&self, objective: Objective) -> Self {
        let mut run = self.clone();
        run.objective = objective;
        run.model.attention = objective.attention();
        run
    }

    /// Learning rate at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = ((self.warmup_frac * self.steps as f64).ceil() as usize).max(1);
        if step < warmup {
            return self.lr * (step + 1) as f64 / warmup as f64;
        }
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Linear => {
                let span = self.steps.saturating_sub(warmup).max(1) as f64;
                let progress = ((step - warmup) as f64 / span).min(1.0);
                self.lr * (1.0 - 0.9 * progress)
            }
        }
    }
}

/// Sequence length an objective needs for documents of `doc_len` tokens.
pub fn required_seq_len(objective: Objective, doc_len: usize) -> usize {
    match objective {
        Objective::NtpMasking => 2 * doc_len + 1,
        Objective::Ntp | Objective::Mlm => doc_len,
    }
}

/// Builds the training example for `doc` under `run`'s objective.
pub fn make_example(
    doc: &Document,
    corpus: &Corpus,
    run: &RunConfig,
    seed: u64,
) -> Result<TrainingExample, ObjectiveError> {
    match run.objective {
        Objective::Ntp => Ok(build_ntp(doc, &corpus.vocab)),
        Objective::Mlm => build_mlm(doc, &run.policy, &corpus.vocab, seed),
        Objective::NtpMasking => {
            // The low bits pick the variant; the example builder gets a fresh stream.
            let coin = (seed >> 11) as f64 / (1u64 << 53) as f64;
            if coin < run.plain_fraction {
                Ok(build_ntp(doc, &corpus.vocab))
            } else {
                build_ntp_masking(doc, &run.policy, &corpus.vocab, seed.rotate_left(17))
            }
        }
    }
}

/// Called after every `check_every` steps with the current parameters.
pub type Observer<'a> = dyn FnMut(usize, &Parameters<f32>, &[f64]) + 'a;

/// Trains a fresh model on `corpus` under `run`.
pub fn train(corpus: &Corpus, run: &RunConfig) -> Result<Checkpoint, TrainError> {
    train_observed(corpus, run, &mut |_, _, _| {})
}

pub fn train_observed(
    corpus: &Corpus,
    run: &RunConfig,
    observer: &mut Observer<'_>,
) -> Result<Checkpoint, TrainError> {
    run.validate()?;
    if run.model.vocab_size != corpus.vocab.size() {
        return Err(TrainError::Config(format!(
            "model vocab {} does not match corpus vocab {}",
            run.model.vocab_size,
            corpus.vocab.size()
        )));
    }
    let needed = required_seq_len(run.objective, corpus.max_doc_len());
    if needed > run.model.max_seq_len {
        return Err(TrainError::Config(format!(
            "max_seq_len {} is shorter than the {needed} tokens this objective needs",
            run.model.max_seq_len
        )));
    }
    let leaks = corpus.leakage_audit();
    if !leaks.is_empty() {
        return Err(TrainError::Leakage(leaks.len()));
    }
    if corpus.train_docs.is_empty() && run.steps > 0 {
        return Err(TrainError::Config("corpus has no training documents".into()));
    }

    let mut params = model::init::<f32>(&run.model, run.seed)?;
    let mut adam = AdamState::new(&params, run.adam);
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed ^ 0x5eed_da7a);
    let mut order: Vec<usize> = (0..corpus.train_docs.len()).collect();
    let mut cursor = order.len();
    let mut loss_log = Vec::with_capacity(run.steps);
    let mut batch = Vec::with_capacity(run.batch_size);

    for step in 0..run.steps {
        batch.clear();
        while batch.len() < run.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let doc = &corpus.train_docs[order[cursor]];
            cursor += 1;
            batch.push(make_example(doc, corpus, run, rng.next_u64())?);
        }
        let loss = match model::grad_step(&mut params, &batch, &mut adam, run.lr_at(step)) {
            Ok(l) => l.unwrap_or(f64::NAN),
            Err(ModelError::NonFiniteLoss { loss }) => return Err(TrainError::Diverged { step, loss }),
            Err(e) => return Err(e.into()),
        };
        loss_log.push(loss);

        if let Some(es) = run.early_stop.filter(|es| es.check_every > 0) {
            if (step + 1) % es.check_every == 0 {
                observer(step + 1, &params, &loss_log);
                if should_stop(&params, corpus, run.objective, &loss_log, &es) {
                    break;
                }
            }
        }
    }
    Ok(Checkpoint { params, steps: loss_log.len(), loss_log })
}

fn window_mean(xs: &[f64]) -> f64 {
    let vals: Vec<f64> = xs.iter().copied().filter(|x| x.is_finite()).collect();
    vals.iter().sum::<f64>() / vals.len().max(1) as f64
}

fn should_stop(
    params: &Parameters<f32>,
    corpus: &Corpus,
    objective: Objective,
    loss_log: &[f64],
    es: &EarlyStop,
) -> bool {
    let w = es.check_every;
    if loss_log.len() < 2 * w || corpus.heldout_facts.is_empty() {
        return false;
    }
    let recent = window_mean(&loss_log[loss_log.len() - w..]);
    let previous = window_mean(&loss_log[loss_log.len() - 2 * w..loss_log.len() - w]);
    let plateau = previous - recent < es.min_improvement * previous.abs();
    plateau && forward_accuracy(params, corpus, objective) >= es.forward_accuracy
}

/// Argmax token at the last position of each decoder prompt, or at the
/// `[MASK]` position of each MLM prompt.
pub fn predict(
    params: &Parameters<f32>,
    prompts: &[Vec<TokenId>],
    answer_positions: &[usize],
) -> Result<Vec<TokenId>, ModelError> {
    let mut out = Vec::with_capacity(prompts.len());
    for (chunk, positions) in prompts.chunks(256).zip(answer_positions.chunks(256)) {
        for ((logits, _), &pos) in model::forward_batch(params, chunk, &[])?.iter().zip(positions) {
            let row = logits.row(pos);
            let best = row
                .iter()
                .enumerate()
                .fold((0usize, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0;
            out.push(best as TokenId);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Reversal,
    Forward,
    FalseFrame,
}

/// Prompt tokens and the answer position for querying `fact` (a forward
/// fact) in the given way.
pub fn query_prompt(
    fact: &Fact,
    kind: QueryKind,
    objective: Objective,
    corpus: &Corpus,
) -> (Vec<TokenId>, usize, TokenId) {
    let v = &corpus.vocab;
    let (first, relation, answer) = match kind {
        QueryKind::Reversal => {
            let rev = reverse_fact(fact, v);
            (rev.source, rev.relation, fact.source)
        }
        QueryKind::Forward => (fact.source, fact.relation, fact.target),
        QueryKind::FalseFrame => (fact.target, fact.relation, fact.source),
    };
    match objective {
        Objective::Mlm => (vec![first, relation, v.mask], 2, answer),
        Objective::Ntp | Objective::NtpMasking => (vec![first, relation], 1, answer),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactOutcome {
    pub fact: Fact,
    pub predicted: TokenId,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub reversal_accuracy: f64,
    pub forward_accuracy: f64,
    pub false_frame_accuracy: f64,
    /// Reversal outcome per held-out fact.
    pub outcomes: Vec<FactOutcome>,
}

fn query_outcomes(
    params: &Parameters<f32>,
    corpus: &Corpus,
    facts: &[Fact],
    objective: Objective,
    kind: QueryKind,
) -> Result<Vec<FactOutcome>, ModelError> {
    let mut prompts = Vec::with_capacity(facts.len());
    let mut positions = Vec::with_capacity(facts.len());
    let mut answers = Vec::with_capacity(facts.len());
    for fact in facts {
        let (p, pos, ans) = query_prompt(fact, kind, objective, corpus);
        prompts.push(p);
        positions.push(pos);
        answers.push(ans);
    }
    let predicted = predict(params, &prompts, &positions)?;
    Ok(facts
        .iter()
        .zip(predicted)
        .zip(answers)
        .map(|((&fact, predicted), answer)| FactOutcome { fact, predicted, correct: predicted == answer })
        .collect())
}

fn accuracy(outcomes: &[FactOutcome]) -> f64 {
    if outcomes.is_empty() {
        return 0.0;
    }
    outcomes.iter().filter(|o| o.correct).count() as f64 / outcomes.len() as f64
}

/// Accuracy of one query kind over the held-out facts.
pub fn query_accuracy(
    params: &Parameters<f32>,
    corpus: &Corpus,
    objective: Objective,
    kind: QueryKind,
) -> Result<f64, ModelError> {
    Ok(accuracy(&query_outcomes(params, corpus, &corpus.heldout_facts, objective, kind)?))
}

fn forward_accuracy(params: &Parameters<f32>, corpus: &Corpus, objective: Objective) -> f64 {
    query_accuracy(params, corpus, objective, QueryKind::Forward).unwrap_or(0.0)
}

/// Reversal, forward and false-frame accuracy over the held-out facts.
pub fn eval_reversal(ckpt: &Checkpoint, corpus: &Corpus, objective: Objective) -> Result<EvalReport, TrainError> {
    if corpus.heldout_facts.is_empty() {
        return Err(TrainError::NoHeldout);
    }
    let p = &ckpt.params;
    let outcomes = query_outcomes(p, corpus, &corpus.heldout_facts, objective, QueryKind::Reversal)?;
    Ok(EvalReport {
        reversal_accuracy: accuracy(&outcomes),
        forward_accuracy: query_accuracy(p, corpus, objective, QueryKind::Forward)?,
        false_frame_accuracy: query_accuracy(p, corpus, objective, QueryKind::FalseFrame)?,
        outcomes,
    })
}

/// Fraction of held-out facts for which `B r ?` (relation unchanged, roles
/// swapped) yields the training-time source `A`.
pub fn eval_false_frame(ckpt: &Checkpoint, corpus: &Corpus, objective: Objective) -> Result<f64, TrainError> {
    if corpus.heldout_facts.is_empty() {
        return Err(TrainError::NoHeldout);
    }
    Ok(query_accuracy(&ckpt.params, corpus, objective, QueryKind::FalseFrame)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub policy: MaskingPolicy,
    pub objective: Objective,
    pub seed: u64,
    pub reversal_accuracy: f64,
    pub forward_accuracy: f64,
}

/// Trains and evaluates one run per sweep policy, all from `base_run`'s
/// initialization seed.
pub fn run_sweep(corpus: &Corpus, base_run: &RunConfig) -> Result<Vec<SweepRow>, TrainError> {
    if base_run.objective == Objective::Ntp {
        return Err(TrainError::Config("the masking sweep needs MLM or NTP+Masking".into()));
    }
    enumerate_sweep_policies()
        .into_iter()
        .map(|policy| {
            let run = base_run.with_policy(policy);
            let ckpt = train(corpus, &run)?;
            let report = eval_reversal(&ckpt, corpus, run.objective)?;
            Ok(SweepRow {
                policy,
                objective: run.objective,
                seed: run.seed,
                reversal_accuracy: report.reversal_accuracy,
                forward_accuracy: report.forward_accuracy,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeverMaskTargetResult {
    /// Accuracy on `A r [MASK]` expecting `B`.
    pub forward_accuracy: f64,
    pub report: EvalReport,
}

/// Trains an MLM whose target entity is never masked, then asks it for the
/// target on the forward prompt.
pub fn eval_forward_after_never_mask_target(
    corpus: &Corpus,
    run: &RunConfig,
) -> Result<NeverMaskTargetResult, TrainError> {
    if run.objective != Objective::Mlm {
        return Err(TrainError::Config("the never-mask-target ablation is an MLM run".into()));
    }
    let run = run.with_policy(ablation_policy(AblationKind::NeverMaskTarget));
    let ckpt = train(corpus, &run)?;
    let report = eval_reversal(&ckpt, corpus, run.objective)?;
    Ok(NeverMaskTargetResult { forward_accuracy: report.forward_accuracy, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_simple_reversal;

    fn tiny_run(corpus: &Corpus, objective: Objective) -> RunConfig {
        let mut run = RunConfig::standard(objective, corpus);
        run.model.n_layers = 1;
        run.model.d_model = 8;
        run.model.n_heads = 2;
        run.model.d_mlp = 16;
        run.steps = 3;
        run.batch_size = 4;
        run.early_stop = None;
        run
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let corpus = generate_simple_reversal(5, 2, 2, 1, 0).unwrap();
        let mut run = tiny_run(&corpus, Objective::Mlm);
        run.steps = 0;
        let ckpt = train(&corpus, &run).unwrap();
        assert_eq!(ckpt.params, model::init::<f32>(&run.model, run.seed).unwrap());
        assert!(ckpt.loss_log.is_empty());
    }

    #[test]
    fn rejects_mismatched_attention() {
        let corpus = generate_simple_reversal(5, 2, 2, 1, 0).unwrap();
        let mut run = tiny_run(&corpus, Objective::Mlm);
        run.model.attention = crate::model::AttentionMode::Causal;
        assert!(matches!(train(&corpus, &run), Err(TrainError::Config(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let corpus = generate_simple_reversal(6, 2, 2, 2, 3).unwrap();
        let run = tiny_run(&corpus, Objective::NtpMasking);
        let a = train(&corpus, &run).unwrap();
        let b = train(&corpus, &run).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let corpus = generate_simple_reversal(5, 2, 2, 1, 0).unwrap();
        let mut run = tiny_run(&corpus, Objective::Ntp);
        run.steps = 1000;
        run.lr = 1e-3;
        assert!((run.lr_at(0) - 1e-4).abs() < 1e-12);
        assert!((run.lr_at(9) - 1e-3).abs() < 1e-12);
        assert_eq!(run.lr_at(500), 1e-3);
        run.schedule = LrSchedule::Linear;
        assert!((run.lr_at(999) - 1e-4).abs() < 1e-5);
    }

    #[test]
    fn prompts_follow_the_query_table() {
        let corpus = generate_simple_reversal(5, 1, 1, 0, 0).unwrap();
        let f = corpus.facts[0];
        let inv = corpus.vocab.inverse(f.relation).unwrap();
        let mask = corpus.vocab.mask;
        assert_eq!(
            query_prompt(&f, QueryKind::Reversal, Objective::Mlm, &corpus),
            (vec![f.target, inv, mask], 2, f.source)
        );
        assert_eq!(
            query_prompt(&f, QueryKind::Reversal, Objective::NtpMasking, &corpus),
            (vec![f.target, inv], 1, f.source)
        );
        assert_eq!(
            query_prompt(&f, QueryKind::FalseFrame, Objective::Ntp, &corpus),
            (vec![f.target, f.relation], 1, f.source)
        );
        assert_eq!(
            query_prompt(&f, QueryKind::Forward, Objective::Mlm, &corpus),
            (vec![f.source, f.relation, mask], 2, f.target)
        );
    }
}
