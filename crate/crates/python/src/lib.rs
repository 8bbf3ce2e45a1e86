//! Python bindings: corpora, masking policies, example construction,
//! training, evaluation, analysis and report suites.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use revcurse::analysis::{self, extract_states, ControlKind, DecoderAnchor, ProbeOptions, ReferenceKind};
use revcurse::corpus as corpus_mod;
use revcurse::model::Checkpoint;
use revcurse::objectives::{self, MaskMode, MaskingPolicy as CoreMaskingPolicy, Objective, SlotSet};
use revcurse::reporting::{self, SuiteConfig, Workspace};
use revcurse::training::{self, query_prompt, QueryKind};

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn parse_objective(s: &str) -> PyResult<Objective> {
    s.parse().map_err(value_err)
}

fn preset(name: &str) -> PyResult<SuiteConfig> {
    match name {
        "desk" => Ok(SuiteConfig::desk()),
        "full" => Ok(SuiteConfig::full()),
        other => Err(PyValueError::new_err(format!("unknown preset `{other}` (desk, full)"))),
    }
}

/// A generated fact corpus.
#[pyclass(frozen)]
struct Corpus {
    inner: corpus_mod::Corpus,
}

#[pymethods]
impl Corpus {
    #[staticmethod]
    #[pyo3(signature = (n_entities=1000, n_relations=20, n_heldout=200, max_affix=5, seed=0))]
    fn simple_reversal(n_entities: usize, n_relations: usize, n_heldout: usize, max_affix: usize, seed: u64) -> PyResult<Self> {
        let inner = corpus_mod::generate_simple_reversal(n_entities, n_relations, n_heldout, max_affix, seed).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    #[pyo3(signature = (n_comparisons=100, n_comparison_words=28, repeats=10, reverse_fraction=0.4, seed=0))]
    fn nonsense(n_comparisons: usize, n_comparison_words: usize, repeats: usize, reverse_fraction: f64, seed: u64) -> PyResult<Self> {
        let inner = corpus_mod::generate_nonsense(n_comparisons, n_comparison_words, repeats, reverse_fraction, seed)
            .map_err(value_err)?;
        Ok(Self { inner })
    }

    /// The corpus used by a preset (`desk` or `full`).
    #[staticmethod]
    #[pyo3(signature = (name="desk", seed=0))]
    fn preset(name: &str, seed: u64) -> PyResult<Self> {
        let inner = preset(name)?.corpus.generate(seed).map_err(value_err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let inner = corpus_mod::Corpus::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { inner })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn n_facts(&self) -> usize {
        self.inner.facts.len()
    }

    #[getter]
    fn n_train_docs(&self) -> usize {
        self.inner.train_docs.len()
    }

    #[getter]
    fn vocab_size(&self) -> usize {
        self.inner.vocab.size()
    }

    #[getter]
    fn mask_token(&self) -> u32 {
        self.inner.vocab.mask
    }

    /// Forward facts as `(source, relation, target)` token triples.
    #[getter]
    fn facts(&self) -> Vec<(u32, u32, u32)> {
        self.inner.facts.iter().map(|f| (f.source, f.relation, f.target)).collect()
    }

    #[getter]
    fn heldout_facts(&self) -> Vec<(u32, u32, u32)> {
        self.inner.heldout_facts.iter().map(|f| (f.source, f.relation, f.target)).collect()
    }

    fn document(&self, index: usize) -> PyResult<Vec<u32>> {
        self.inner
            .train_docs
            .get(index)
            .map(|d| d.tokens.clone())
            .ok_or_else(|| PyValueError::new_err(format!("document {index} out of range")))
    }

    /// Number of training documents containing a held-out fact reversed.
    fn leakage(&self) -> usize {
        self.inner.leakage_audit().len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Corpus(facts={}, train_docs={}, heldout={}, vocab={})",
            self.inner.facts.len(),
            self.inner.train_docs.len(),
            self.inner.heldout_facts.len(),
            self.inner.vocab.size()
        )
    }
}

/// Which fact slots may be masked and how.
#[pyclass(frozen, skip_from_py_object)]
#[derive(Clone)]
struct MaskingPolicy {
    inner: CoreMaskingPolicy,
}

#[pymethods]
impl MaskingPolicy {
    /// `mode` is one of `exactly-one`, `slot-pairs`, `rate`, `ratio`.
    #[new]
    #[pyo3(signature = (slots="S+R+T", mode="exactly-one", rate=0.15, lo=0.05, hi=0.95))]
    fn new(slots: &str, mode: &str, rate: f64, lo: f64, hi: f64) -> PyResult<Self> {
        let maskable: SlotSet = slots.parse().map_err(PyValueError::new_err)?;
        let mode = match mode {
            "exactly-one" => MaskMode::ExactlyOneSlot,
            "slot-pairs" => MaskMode::SlotPairs,
            "rate" => MaskMode::TokenRate { rate },
            "ratio" => MaskMode::RatioRange { lo, hi },
            other => return Err(PyValueError::new_err(format!("unknown mask mode `{other}`"))),
        };
        Ok(Self { inner: CoreMaskingPolicy::new(maskable, mode).map_err(value_err)? })
    }

    #[staticmethod]
    fn sweep() -> Vec<MaskingPolicy> {
        objectives::enumerate_sweep_policies().into_iter().map(|inner| Self { inner }).collect()
    }

    /// `never-source` or `never-target`.
    #[staticmethod]
    fn ablation(kind: &str) -> PyResult<Self> {
        let kind = match kind {
            "never-source" => objectives::AblationKind::NeverMaskSource,
            "never-target" => objectives::AblationKind::NeverMaskTarget,
            other => return Err(PyValueError::new_err(format!("unknown ablation `{other}`"))),
        };
        Ok(Self { inner: objectives::ablation_policy(kind) })
    }

    #[getter]
    fn label(&self) -> String {
        self.inner.label()
    }

    fn __repr__(&self) -> String {
        format!("MaskingPolicy({})", self.inner.label())
    }
}

/// Builds the training example for one document as a dict of
/// `input`, `target`, `loss_mask` and `attention`.
#[pyfunction]
#[pyo3(signature = (corpus, doc_index, objective, policy=None, seed=0))]
fn build_example<'py>(
    py: Python<'py>,
    corpus: &Corpus,
    doc_index: usize,
    objective: &str,
    policy: Option<&MaskingPolicy>,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let doc = corpus
        .inner
        .train_docs
        .get(doc_index)
        .ok_or_else(|| PyValueError::new_err(format!("document {doc_index} out of range")))?;
    let policy = policy.map_or_else(CoreMaskingPolicy::standard, |p| p.inner);
    let v = &corpus.inner.vocab;
    let ex = match parse_objective(objective)? {
        Objective::Ntp => objectives::build_ntp(doc, v),
        Objective::Mlm => objectives::build_mlm(doc, &policy, v, seed).map_err(value_err)?,
        Objective::NtpMasking => objectives::build_ntp_masking(doc, &policy, v, seed).map_err(value_err)?,
    };
    let d = PyDict::new(py);
    d.set_item("input", ex.input)?;
    d.set_item("target", ex.target)?;
    d.set_item("loss_mask", ex.loss_mask)?;
    d.set_item("attention", ex.attention.as_str())?;
    Ok(d)
}

/// A trained checkpoint together with the objective it was trained on.
#[pyclass(frozen)]
struct Model {
    ckpt: Checkpoint,
    objective: Objective,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: PathBuf, objective: &str) -> PyResult<Self> {
        let ckpt = Checkpoint::load(&path).map_err(|e| PyIOError::new_err(e.to_string()))?;
        Ok(Self { ckpt, objective: parse_objective(objective)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.ckpt.save(&path).map_err(|e| PyIOError::new_err(e.to_string()))
    }

    #[getter]
    fn steps(&self) -> usize {
        self.ckpt.steps
    }

    #[getter]
    fn objective(&self) -> &'static str {
        self.objective.as_str()
    }

    #[getter]
    fn loss_log(&self) -> Vec<f64> {
        self.ckpt.loss_log.clone()
    }

    /// Reversal, forward and false-frame accuracy on the held-out facts.
    fn evaluate<'py>(&self, py: Python<'py>, corpus: &Corpus) -> PyResult<Bound<'py, PyDict>> {
        let report = py
            .detach(|| training::eval_reversal(&self.ckpt, &corpus.inner, self.objective))
            .map_err(value_err)?;
        let d = PyDict::new(py);
        d.set_item("reversal_acc", report.reversal_accuracy)?;
        d.set_item("forward_acc", report.forward_accuracy)?;
        d.set_item("false_frame_acc", report.false_frame_accuracy)?;
        Ok(d)
    }

    /// Predicted answer token for a fact queried as `reversal`, `forward`
    /// or `false-frame`.
    fn answer(&self, corpus: &Corpus, fact: (u32, u32, u32), query: &str) -> PyResult<u32> {
        let kind = match query {
            "reversal" => QueryKind::Reversal,
            "forward" => QueryKind::Forward,
            "false-frame" => QueryKind::FalseFrame,
            other => return Err(PyValueError::new_err(format!("unknown query `{other}`"))),
        };
        let fact = corpus_mod::Fact::forward(fact.0, fact.1, fact.2);
        if corpus.inner.vocab.inverse(fact.relation).is_none() {
            return Err(PyValueError::new_err("fact relation is not a relation token"));
        }
        let (prompt, pos, _) = query_prompt(&fact, kind, self.objective, &corpus.inner);
        let out = training::predict(&self.ckpt.params, &[prompt], &[pos]).map_err(value_err)?;
        Ok(out[0])
    }
}

/// Trains a model with a preset's settings; keyword overrides replace
/// single fields.
#[pyfunction]
#[pyo3(signature = (corpus, objective, policy=None, preset="desk", seed=0, steps=None, lr=None, weight_decay=None))]
#[allow(clippy::too_many_arguments)]
fn train(
    py: Python<'_>,
    corpus: &Corpus,
    objective: &str,
    policy: Option<&MaskingPolicy>,
    preset: &str,
    seed: u64,
    steps: Option<usize>,
    lr: Option<f64>,
    weight_decay: Option<f64>,
) -> PyResult<Model> {
    let objective = parse_objective(objective)?;
    let mut template = self::preset(preset)?.run;
    if let Some(s) = steps {
        template.steps = s;
    }
    if let Some(l) = lr {
        template.lr = l;
    }
    if let Some(w) = weight_decay {
        template.adam.weight_decay = w;
    }
    let policy = policy.map_or_else(CoreMaskingPolicy::standard, |p| p.inner);
    let run = template.run(objective, policy, &corpus.inner, seed);
    let ckpt = py.detach(|| training::train(&corpus.inner, &run)).map_err(value_err)?;
    Ok(Model { ckpt, objective })
}

/// Per-layer cosine distances and probe results for a trained model.
#[pyfunction]
#[pyo3(signature = (model, corpus, n_facts=20, shuffles=100, seed=0))]
fn analyze<'py>(
    py: Python<'py>,
    model: &Model,
    corpus: &Corpus,
    n_facts: usize,
    shuffles: usize,
    seed: u64,
) -> PyResult<Bound<'py, PyDict>> {
    let c = &corpus.inner;
    let (distances, probes) = py
        .detach(|| -> Result<_, analysis::AnalysisError> {
            let records = extract_states(&model.ckpt.params, &c.facts, model.objective, &c.vocab, DecoderAnchor::Prompt)?;
            let mut distances = Vec::new();
            for kind in ReferenceKind::ALL {
                distances.extend(analysis::mean_cosine_distance(&c.facts, &records, kind, n_facts, seed)?);
            }
            let opts = ProbeOptions { n_shuffles: shuffles, ..ProbeOptions::default() };
            let mut probes = Vec::new();
            for control in ControlKind::ALL {
                probes.extend(analysis::probe_layers(&c.facts, &records, control, &opts, seed)?);
            }
            Ok((distances, probes))
        })
        .map_err(value_err)?;
    let out = PyDict::new(py);
    let rows = distances
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("layer", r.layer)?;
            d.set_item("kind", r.kind.as_str())?;
            d.set_item("mean", r.mean)?;
            d.set_item("std", r.std)?;
            d.set_item("n", r.n)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("distances", rows)?;
    let rows = probes
        .iter()
        .map(|r| {
            let d = PyDict::new(py);
            d.set_item("layer", r.layer)?;
            d.set_item("control_kind", r.control_kind.as_str())?;
            d.set_item("accuracy", r.accuracy)?;
            d.set_item("null_low", r.null_low)?;
            d.set_item("null_high", r.null_high)?;
            Ok(d)
        })
        .collect::<PyResult<Vec<_>>>()?;
    out.set_item("probes", rows)?;
    Ok(out)
}

/// Runs a named suite into `out`; returns `(passed, [(check, passed, detail)])`.
#[pyfunction]
#[pyo3(signature = (suite, seeds, out, preset="desk"))]
fn report(
    py: Python<'_>,
    suite: &str,
    seeds: Vec<u64>,
    out: PathBuf,
    preset: &str,
) -> PyResult<(bool, Vec<(String, bool, String)>)> {
    let suite: reporting::Suite = suite.parse().map_err(value_err)?;
    let config = self::preset(preset)?;
    let manifest = py
        .detach(|| {
            let mut ws = Workspace::new(out);
            reporting::run_suite(&mut ws, suite, &seeds, &config)
        })
        .map_err(value_err)?;
    let checks = manifest.checks.iter().map(|c| (c.name.clone(), c.passed, c.detail.clone())).collect();
    Ok((manifest.passed(), checks))
}

#[pymodule]
fn pyrevcurse(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Corpus>()?;
    m.add_class::<MaskingPolicy>()?;
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(build_example, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    Ok(())
}
