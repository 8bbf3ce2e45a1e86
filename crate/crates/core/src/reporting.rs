//! Experiment suites, manifests and SVG rendering of the CSV outputs.
//!
//! Every suite runs per seed into `<out>/<suite>/seed-<s>/` and records
//! its checks in `<out>/<suite>/manifest.json`. Trained checkpoints are
//! cached under `<out>/runs/<hash>/` keyed by corpus and run configuration,
//! so suites that need the same model share it and reruns skip finished
//! work.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{
    self, extract_states, mean_cosine_distance, probe_layers, AnalysisError, ControlKind, DecoderAnchor,
    DistanceRow, ProbeOptions, ProbeRow, ReferenceKind,
};
use crate::corpus::{Corpus, CorpusConfig, CorpusError};
use crate::model::{AdamConfig, Checkpoint, ModelConfig};
use crate::objectives::{
    ablation_policy, enumerate_sweep_policies, AblationKind, MaskMode, MaskingPolicy, Objective, Slot, SlotSet,
};
use crate::training::{
    self, eval_reversal, required_seq_len, EarlyStop, EvalReport, LrSchedule, RunConfig, TrainError,
};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("no seeds given")]
    NoSeeds,
    #[error("unknown suite `{0}`")]
    UnknownSuite(String),
    #[error("{path}: {message}")]
    Schema { path: PathBuf, message: String },
    #[error("{0}: nothing to plot")]
    EmptyPlot(PathBuf),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Fig1,
    Table1,
    Fig2,
    Fig3,
    Fig4,
    Ablation2,
    Ablation3,
}

impl Suite {
    pub const ALL: [Suite; 7] =
        [Suite::Fig1, Suite::Table1, Suite::Fig2, Suite::Fig3, Suite::Fig4, Suite::Ablation2, Suite::Ablation3];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Fig1 => "fig1",
            Suite::Table1 => "table1",
            Suite::Fig2 => "fig2",
            Suite::Fig3 => "fig3",
            Suite::Fig4 => "fig4",
            Suite::Ablation2 => "ablation2",
            Suite::Ablation3 => "ablation3",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s)
            .ok_or_else(|| ReportError::UnknownSuite(s.to_string()))
    }
}

/// Model and optimizer settings shared by every run of a suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunTemplate {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub tie_embeddings: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_frac: f64,
    pub schedule: LrSchedule,
    pub plain_fraction: f64,
    pub adam: AdamConfig,
    pub early_stop: Option<EarlyStop>,
}

impl RunTemplate {
    pub fn run(&self, objective: Objective, policy: MaskingPolicy, corpus: &Corpus, seed: u64) -> RunConfig {
        RunConfig {
            objective,
            policy,
            model: ModelConfig {
                n_layers: self.n_layers,
                d_model: self.d_model,
                n_heads: self.n_heads,
                d_mlp: self.d_mlp,
                vocab_size: corpus.vocab.size(),
                max_seq_len: required_seq_len(objective, corpus.max_doc_len().max(3)),
                attention: objective.attention(),
                tie_embeddings: self.tie_embeddings,
            },
            steps: self.steps,
            batch_size: self.batch_size,
            lr: self.lr,
            warmup_frac: self.warmup_frac,
            schedule: self.schedule,
            seed,
            plain_fraction: self.plain_fraction,
            adam: self.adam,
            early_stop: self.early_stop,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSettings {
    /// Anchors per distance curve.
    pub n_facts: usize,
    pub probes: ProbeOptions,
    pub decoder_anchor: DecoderAnchor,
}

impl Default for AnalysisSettings {
    fn default() -> Self {
        Self { n_facts: 20, probes: ProbeOptions::default(), decoder_anchor: DecoderAnchor::Prompt }
    }
}

/// Everything a suite's results depend on besides the seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub corpus: CorpusConfig,
    pub run: RunTemplate,
    pub analysis: AnalysisSettings,
}

impl SuiteConfig {
    /// 1,000 entities x 20 relations, 4 layers of width 256, 30k steps.
    pub fn full() -> Self {
        Self {
            corpus: CorpusConfig::simple_reversal_standard(),
            run: RunTemplate {
                n_layers: 4,
                d_model: 256,
                n_heads: 4,
                d_mlp: 1024,
                tie_embeddings: false,
                steps: 30_000,
                batch_size: 64,
                lr: 1e-3,
                warmup_frac: 0.01,
                schedule: LrSchedule::Constant,
                plain_fraction: 0.5,
                adam: AdamConfig::default(),
                early_stop: Some(EarlyStop::default()),
            },
            analysis: AnalysisSettings::default(),
        }
    }

    /// 100 entities x 2 relations, 2 layers of width 64, 30k steps with linear
    /// decay and strong weight decay. About five minutes per run on one core.
    pub fn desk() -> Self {
        Self {
            corpus: CorpusConfig::SimpleReversal { n_entities: 100, n_relations: 2, n_heldout: 50, max_affix: 0 },
            run: RunTemplate {
                n_layers: 2,
                d_model: 64,
                n_heads: 4,
                d_mlp: 256,
                tie_embeddings: false,
                steps: 30_000,
                batch_size: 64,
                lr: 2e-3,
                warmup_frac: 0.01,
                schedule: LrSchedule::Linear,
                plain_fraction: 0.5,
                adam: AdamConfig { weight_decay: 1.0, ..AdamConfig::default() },
                early_stop: None,
            },
            analysis: AnalysisSettings::default(),
        }
    }

    /// SHA-256 of the canonical JSON form; independent of field order.
    pub fn hash(&self) -> String {
        config_hash(&serde_json::to_value(self).expect("config serializes"))
    }
}

fn canonical(v: &Value) -> Value {
    match v {
        Value::Object(map) => {
            let sorted: BTreeMap<&String, Value> = map.iter().map(|(k, v)| (k, canonical(v))).collect();
            Value::Object(sorted.into_iter().map(|(k, v)| (k.clone(), v)).collect())
        }
        Value::Array(xs) => Value::Array(xs.iter().map(canonical).collect()),
        other => other.clone(),
    }
}

/// Hex SHA-256 of `value` serialized with object keys in sorted order.
pub fn config_hash(value: &Value) -> String {
    let text = serde_json::to_string(&canonical(value)).expect("json value serializes");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// `git describe` of the source tree this binary was built from.
pub fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["-C", env!("CARGO_MANIFEST_DIR"), "describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub seed: u64,
    pub stage: String,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub suite: Suite,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub config: SuiteConfig,
    pub git_describe: String,
    /// Paths relative to the output directory.
    pub artifacts: Vec<String>,
    pub wall_clock_secs: f64,
    pub checks: Vec<CheckResult>,
    pub failures: Vec<StageFailure>,
}

impl ExperimentManifest {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checks.iter().all(|c| c.passed)
    }
}

/// One trained-and-evaluated run as it appears in `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub policy: String,
    pub objective: Objective,
    pub seed: u64,
    pub reversal_acc: f64,
    pub forward_acc: f64,
    pub false_frame_acc: f64,
}

pub const METRICS_HEADER: [&str; 5] = ["policy", "objective", "seed", "reversal_acc", "forward_acc"];

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<(), ReportError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record([
            r.policy.clone(),
            r.objective.to_string(),
            r.seed.to_string(),
            format!("{:.6}", r.reversal_acc),
            format!("{:.6}", r.forward_acc),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Label of a policy as used in metrics files: `ntp` for plain NTP runs.
pub fn policy_label(objective: Objective, policy: &MaskingPolicy) -> String {
    match objective {
        Objective::Ntp => "none".to_string(),
        _ => policy.label(),
    }
}

/// Written next to every trained checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run: RunConfig,
    pub corpus: CorpusConfig,
    pub corpus_seed: u64,
    pub git_describe: String,
    pub steps_run: usize,
    pub final_loss: Option<f64>,
    pub wall_clock_secs: f64,
    pub metrics: MetricsRow,
}

/// Where runs and suites are written, plus the corpus cache.
pub struct Workspace {
    pub out: PathBuf,
    corpora: BTreeMap<(String, u64), Corpus>,
    /// Print progress lines to stderr.
    pub verbose: bool,
}

impl Workspace {
    pub fn new(out: impl Into<PathBuf>) -> Self {
        Self { out: out.into(), corpora: BTreeMap::new(), verbose: false }
    }

    pub fn corpus(&mut self, config: &CorpusConfig, seed: u64) -> Result<Corpus, ReportError> {
        let key = (config_hash(&serde_json::to_value(config)?), seed);
        if let Some(c) = self.corpora.get(&key) {
            return Ok(c.clone());
        }
        let corpus = config.generate(seed)?;
        self.corpora.insert(key, corpus.clone());
        Ok(corpus)
    }

    fn run_dir(&self, corpus: &Corpus, run: &RunConfig) -> Result<PathBuf, ReportError> {
        let key = serde_json::json!({ "corpus": corpus.manifest, "run": cache_key(run) });
        Ok(self.out.join("runs").join(&config_hash(&key)[..16]))
    }

    /// Trains `run` on `corpus` unless a finished checkpoint for the same
    /// configuration exists, and evaluates it.
    pub fn trained(&mut self, corpus: &Corpus, run: &RunConfig) -> Result<(Checkpoint, EvalReport), ReportError> {
        let dir = self.run_dir(corpus, run)?;
        train_into(&dir, corpus, run, self.verbose)
    }
}

/// Slot-pair and single-slot sampling draw identically, so runs differing
/// only in that mode share a checkpoint.
fn cache_key(run: &RunConfig) -> RunConfig {
    let mut key = run.clone();
    if key.policy.mode == MaskMode::SlotPairs {
        key.policy.mode = MaskMode::ExactlyOneSlot;
    }
    key
}

/// Trains and evaluates `run` into `dir` (`checkpoint.bin`, `manifest.json`,
/// `metrics.csv`). A directory whose manifest records the same corpus and
/// run is loaded instead of retrained.
pub fn train_into(
    dir: &Path,
    corpus: &Corpus,
    run: &RunConfig,
    verbose: bool,
) -> Result<(Checkpoint, EvalReport), ReportError> {
    let ckpt_path = dir.join("checkpoint.bin");
    let manifest_path = dir.join("manifest.json");
    let finished = fs::read_to_string(&manifest_path)
        .ok()
        .and_then(|t| serde_json::from_str::<RunManifest>(&t).ok())
        .is_some_and(|m| cache_key(&m.run) == cache_key(run) && m.corpus == corpus.manifest.config && m.corpus_seed == corpus.manifest.seed);
    if finished && ckpt_path.exists() {
        let ckpt = Checkpoint::load(&ckpt_path)?;
        let report = eval_reversal(&ckpt, corpus, run.objective)?;
        return Ok((ckpt, report));
    }
    fs::create_dir_all(dir)?;
    if verbose {
        eprintln!(
            "training {} [{}] seed {} -> {}",
            run.objective,
            policy_label(run.objective, &run.policy),
            run.seed,
            dir.display()
        );
    }
    let started = Instant::now();
    let ckpt = training::train(corpus, run)?;
    let report = eval_reversal(&ckpt, corpus, run.objective)?;
    ckpt.save(&ckpt_path)?;
    let metrics = metrics_row(run, &report);
    write_metrics(&dir.join("metrics.csv"), std::slice::from_ref(&metrics))?;
    let manifest = RunManifest {
        run: run.clone(),
        corpus: corpus.manifest.config.clone(),
        corpus_seed: corpus.manifest.seed,
        git_describe: git_describe(),
        steps_run: ckpt.steps,
        final_loss: ckpt.loss_log.last().copied(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
        metrics,
    };
    // The manifest is written last so an interrupted run is retrained.
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok((ckpt, report))
}

fn metrics_row(run: &RunConfig, report: &EvalReport) -> MetricsRow {
    MetricsRow {
        policy: policy_label(run.objective, &run.policy),
        objective: run.objective,
        seed: run.seed,
        reversal_acc: report.reversal_accuracy,
        forward_acc: report.forward_accuracy,
        false_frame_acc: report.false_frame_accuracy,
    }
}

/// The near-zero threshold used by every "fails" check.
pub const NEAR_ZERO: f64 = 0.02;
/// The threshold used by every "succeeds" check.
pub const SUCCESS: f64 = 0.95;
/// Forward accuracy every run must reach before its reversal score counts.
pub const FORWARD_FLOOR: f64 = 0.99;
/// Lower bound for "non-zero" sweep scores.
pub const NONZERO: f64 = 0.10;

/// Results of one seed of one suite, as stored in `cell.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub config_hash: String,
    pub seed: u64,
    pub metrics: Vec<MetricsRow>,
    pub distances: BTreeMap<String, Vec<DistanceRow>>,
    pub probes: BTreeMap<String, Vec<ProbeRow>>,
    pub artifacts: Vec<String>,
}

impl Cell {
    pub fn metric(&self, objective: Objective, policy: &str) -> Option<&MetricsRow> {
        self.metrics.iter().find(|m| m.objective == objective && m.policy == policy)
    }
}

fn standard_policy_label() -> String {
    MaskingPolicy::standard().label()
}

fn ablation_label(kind: AblationKind) -> String {
    ablation_policy(kind).label()
}

fn runs_for(suite: Suite) -> Vec<(Objective, MaskingPolicy)> {
    let std = MaskingPolicy::standard();
    let never_source = ablation_policy(AblationKind::NeverMaskSource);
    match suite {
        Suite::Fig1 => vec![(Objective::Ntp, std), (Objective::Mlm, std), (Objective::NtpMasking, std)],
        Suite::Table1 => vec![
            (Objective::Mlm, std),
            (Objective::NtpMasking, std),
            (Objective::Mlm, never_source),
            (Objective::NtpMasking, never_source),
        ],
        Suite::Fig2 => [Objective::Mlm, Objective::NtpMasking]
            .into_iter()
            .flat_map(|o| enumerate_sweep_policies().into_iter().map(move |p| (o, p)))
            .collect(),
        Suite::Fig3 | Suite::Fig4 | Suite::Ablation2 => {
            vec![(Objective::Mlm, std), (Objective::NtpMasking, std)]
        }
        Suite::Ablation3 => {
            vec![(Objective::Mlm, std), (Objective::Mlm, ablation_policy(AblationKind::NeverMaskTarget))]
        }
    }
}

fn objective_dir(objective: Objective) -> &'static str {
    match objective {
        Objective::Ntp => "ntp",
        Objective::Mlm => "mlm",
        Objective::NtpMasking => "ntp-masking",
    }
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).display().to_string()
}

fn run_cell(
    ws: &mut Workspace,
    suite: Suite,
    config: &SuiteConfig,
    seed: u64,
    dir: &Path,
    failures: &mut Vec<StageFailure>,
) -> Result<Cell, ReportError> {
    let corpus = ws.corpus(&config.corpus, seed)?;
    let mut cell = Cell {
        config_hash: config.hash(),
        seed,
        metrics: Vec::new(),
        distances: BTreeMap::new(),
        probes: BTreeMap::new(),
        artifacts: Vec::new(),
    };
    fs::create_dir_all(dir)?;
    for (objective, policy) in runs_for(suite) {
        let run = config.run.run(objective, policy, &corpus, seed);
        let stage = format!("train:{}:{}", objective, policy_label(objective, &policy));
        let (ckpt, report) = match ws.trained(&corpus, &run) {
            Ok(x) => x,
            Err(e) => {
                failures.push(StageFailure { seed, stage, error: e.to_string() });
                continue;
            }
        };
        cell.metrics.push(metrics_row(&run, &report));
        if matches!(suite, Suite::Fig3 | Suite::Fig4) {
            let sub = dir.join(objective_dir(objective));
            fs::create_dir_all(&sub)?;
            let stage = format!("analyze:{objective}");
            let analysed = analyze_into(&ckpt, &corpus, objective, suite, config, seed, &sub);
            match analysed {
                Ok((distances, probes, paths)) => {
                    if let Some(d) = distances {
                        cell.distances.insert(objective.to_string(), d);
                    }
                    if let Some(p) = probes {
                        cell.probes.insert(objective.to_string(), p);
                    }
                    cell.artifacts.extend(paths.iter().map(|p| rel(&ws.out, p)));
                }
                Err(e) => failures.push(StageFailure { seed, stage, error: e.to_string() }),
            }
        }
    }
    let metrics_path = dir.join("metrics.csv");
    write_metrics(&metrics_path, &cell.metrics)?;
    cell.artifacts.push(rel(&ws.out, &metrics_path));
    if suite == Suite::Ablation2 {
        let path = dir.join("false_frame.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["objective", "seed", "false_frame_acc"])?;
        for m in &cell.metrics {
            w.write_record([m.objective.to_string(), seed.to_string(), format!("{:.6}", m.false_frame_acc)])?;
        }
        w.flush()?;
        cell.artifacts.push(rel(&ws.out, &path));
    }
    Ok(cell)
}

type Analysed = (Option<Vec<DistanceRow>>, Option<Vec<ProbeRow>>, Vec<PathBuf>);

fn analyze_into(
    ckpt: &Checkpoint,
    corpus: &Corpus,
    objective: Objective,
    suite: Suite,
    config: &SuiteConfig,
    seed: u64,
    dir: &Path,
) -> Result<Analysed, ReportError> {
    let records = extract_states(&ckpt.params, &corpus.facts, objective, &corpus.vocab, config.analysis.decoder_anchor)?;
    let mut paths = Vec::new();
    if suite == Suite::Fig3 {
        let mut rows = Vec::new();
        for kind in ReferenceKind::ALL {
            rows.extend(mean_cosine_distance(&corpus.facts, &records, kind, config.analysis.n_facts, seed)?);
        }
        let path = dir.join("distances.csv");
        analysis::write_distances(&path, &rows)?;
        paths.push(path.clone());
        let svg = path.with_extension("svg");
        render_distances(&path, &svg)?;
        paths.push(svg);
        return Ok((Some(rows), None, paths));
    }
    let mut rows = Vec::new();
    for control in ControlKind::ALL {
        rows.extend(probe_layers(&corpus.facts, &records, control, &config.analysis.probes, seed)?);
    }
    let path = dir.join("probes.csv");
    analysis::write_probes(&path, &rows)?;
    paths.push(path.clone());
    let svg = path.with_extension("svg");
    render_probes(&path, &svg)?;
    paths.push(svg);
    Ok((None, Some(rows), paths))
}

/// Runs `suite` for every seed, skipping seeds whose `cell.json` matches the
/// current config hash, then aggregates and checks the results.
pub fn run_suite(
    ws: &mut Workspace,
    suite: Suite,
    seeds: &[u64],
    config: &SuiteConfig,
) -> Result<ExperimentManifest, ReportError> {
    if seeds.is_empty() {
        return Err(ReportError::NoSeeds);
    }
    let started = Instant::now();
    let hash = config.hash();
    let suite_dir = ws.out.join(suite.as_str());
    fs::create_dir_all(&suite_dir)?;
    let mut failures = Vec::new();
    let mut cells = Vec::new();
    for &seed in seeds {
        let dir = suite_dir.join(format!("seed-{seed}"));
        let cell_path = dir.join("cell.json");
        if let Ok(text) = fs::read_to_string(&cell_path) {
            if let Ok(cell) = serde_json::from_str::<Cell>(&text) {
                if cell.config_hash == hash && cell.artifacts.iter().all(|a| ws.out.join(a).exists()) {
                    cells.push(cell);
                    continue;
                }
            }
        }
        let mut cell_failures = Vec::new();
        let cell = run_cell(ws, suite, config, seed, &dir, &mut cell_failures)?;
        // A cell with failed stages is not cached, so a rerun retries it.
        if cell_failures.is_empty() {
            fs::write(&cell_path, serde_json::to_string_pretty(&cell)?)?;
        }
        failures.extend(cell_failures);
        cells.push(cell);
    }

    let mut artifacts: Vec<String> = cells.iter().flat_map(|c| c.artifacts.iter().cloned()).collect();
    let all_metrics: Vec<MetricsRow> = cells.iter().flat_map(|c| c.metrics.iter().cloned()).collect();
    let metrics_path = suite_dir.join("metrics.csv");
    write_metrics(&metrics_path, &all_metrics)?;
    artifacts.push(rel(&ws.out, &metrics_path));
    if matches!(suite, Suite::Fig1 | Suite::Table1 | Suite::Fig2) {
        let svg = suite_dir.join("metrics.svg");
        render_metrics(&metrics_path, &svg)?;
        artifacts.push(rel(&ws.out, &svg));
    }
    let summary = summarize(suite, &cells);
    let summary_path = suite_dir.join("summary.md");
    fs::write(&summary_path, &summary)?;
    artifacts.push(rel(&ws.out, &summary_path));

    let checks = check_suite(suite, &cells, seeds.len());
    let manifest = ExperimentManifest {
        suite,
        config_hash: hash,
        seeds: seeds.to_vec(),
        config: config.clone(),
        git_describe: git_describe(),
        artifacts,
        wall_clock_secs: started.elapsed().as_secs_f64(),
        checks,
        failures,
    };
    fs::write(suite_dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

fn summarize(suite: Suite, cells: &[Cell]) -> String {
    let mut out = format!("# {suite}\n\n");
    let mut keys: Vec<(Objective, String)> = Vec::new();
    for m in cells.iter().flat_map(|c| &c.metrics) {
        if !keys.contains(&(m.objective, m.policy.clone())) {
            keys.push((m.objective, m.policy.clone()));
        }
    }
    if !keys.is_empty() {
        out.push_str("| objective | policy | reversal | forward | false frame | seeds |\n|---|---|---|---|---|---|\n");
        for (objective, policy) in keys {
            let rows: Vec<&MetricsRow> = cells.iter().filter_map(|c| c.metric(objective, &policy)).collect();
            let col = |f: fn(&MetricsRow) -> f64| {
                let (m, s) = mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>());
                format!("{:.1}% ± {:.1}", 100.0 * m, 100.0 * s)
            };
            out.push_str(&format!(
                "| {objective} | {policy} | {} | {} | {} | {} |\n",
                col(|r| r.reversal_acc),
                col(|r| r.forward_acc),
                col(|r| r.false_frame_acc),
                rows.len()
            ));
        }
        out.push('\n');
    }
    let objectives: Vec<String> = cells
        .iter()
        .flat_map(|c| c.distances.keys().chain(c.probes.keys()).cloned())
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    for objective in objectives {
        let dist: Vec<&Vec<DistanceRow>> = cells.iter().filter_map(|c| c.distances.get(&objective)).collect();
        if let Some(first) = dist.first() {
            out.push_str(&format!("## {objective}: mean cosine distance\n\n| layer | kind | mean | std over seeds |\n|---|---|---|---|\n"));
            for (i, row) in first.iter().enumerate() {
                let (m, s) = mean_std(&dist.iter().filter_map(|d| d.get(i)).map(|r| r.mean).collect::<Vec<_>>());
                out.push_str(&format!("| {} | {} | {m:.4} | {s:.4} |\n", row.layer, row.kind));
            }
            out.push('\n');
        }
        let probes: Vec<&Vec<ProbeRow>> = cells.iter().filter_map(|c| c.probes.get(&objective)).collect();
        if let Some(first) = probes.first() {
            out.push_str(&format!("## {objective}: probe accuracy\n\n| layer | control | accuracy | null band | seeds inside band |\n|---|---|---|---|---|\n"));
            for (i, row) in first.iter().enumerate() {
                let same: Vec<&ProbeRow> = probes.iter().filter_map(|p| p.get(i)).collect();
                let (m, _) = mean_std(&same.iter().map(|r| r.accuracy).collect::<Vec<_>>());
                let inside = same.iter().filter(|r| r.inside_null()).count();
                out.push_str(&format!(
                    "| {} | {} | {:.3} | [{:.3}, {:.3}] | {inside}/{} |\n",
                    row.layer.map_or("max".to_string(), |l| l.to_string()),
                    row.control_kind,
                    m,
                    row.null_low,
                    row.null_high,
                    same.len()
                ));
            }
            out.push('\n');
        }
    }
    out
}

fn check(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> CheckResult {
    CheckResult { name: name.into(), passed, detail: detail.into() }
}

/// Checks a metric over every seed; a seed with the run missing fails.
fn metric_check(
    cells: &[Cell],
    name: &str,
    objective: Objective,
    policy: &str,
    value: fn(&MetricsRow) -> f64,
    pass: impl Fn(f64) -> bool,
    bound: &str,
) -> CheckResult {
    let values: Vec<Option<f64>> = cells.iter().map(|c| c.metric(objective, policy).map(value)).collect();
    let ok = !values.is_empty() && values.iter().all(|v| v.is_some_and(&pass));
    let shown: Vec<String> = values
        .iter()
        .map(|v| v.map_or("missing".to_string(), |x| format!("{:.1}%", 100.0 * x)))
        .collect();
    check(name, ok, format!("{objective} [{policy}]: {} (need {bound})", shown.join(", ")))
}

fn forward_floor_checks(cells: &[Cell], runs: &[(Objective, MaskingPolicy)]) -> Vec<CheckResult> {
    runs.iter()
        .map(|(o, p)| {
            let label = policy_label(*o, p);
            metric_check(
                cells,
                &format!("forward accuracy {o} [{label}]"),
                *o,
                &label,
                |m| m.forward_acc,
                |v| v >= FORWARD_FLOOR,
                ">= 99%",
            )
        })
        .collect()
}

fn check_suite(suite: Suite, cells: &[Cell], n_seeds: usize) -> Vec<CheckResult> {
    let std = standard_policy_label();
    let never_source = ablation_label(AblationKind::NeverMaskSource);
    let never_target = ablation_label(AblationKind::NeverMaskTarget);
    let rev = |m: &MetricsRow| m.reversal_acc;
    let mut checks = Vec::new();
    if cells.len() < n_seeds {
        checks.push(check("all seeds ran", false, format!("{} of {n_seeds}", cells.len())));
    }
    match suite {
        Suite::Fig1 => {
            checks.push(metric_check(cells, "NTP reversal fails", Objective::Ntp, "none", rev, |v| v <= NEAR_ZERO, "<= 2%"));
            checks.push(metric_check(cells, "MLM reversal succeeds", Objective::Mlm, &std, rev, |v| v >= SUCCESS, ">= 95%"));
            checks.push(metric_check(cells, "NTP+Masking reversal succeeds", Objective::NtpMasking, &std, rev, |v| v >= SUCCESS, ">= 95%"));
            checks.extend(forward_floor_checks(cells, &runs_for(suite)));
        }
        Suite::Table1 => {
            checks.push(metric_check(cells, "MLM reversal succeeds", Objective::Mlm, &std, rev, |v| v >= SUCCESS, ">= 95%"));
            checks.push(metric_check(cells, "NTP+Masking reversal succeeds", Objective::NtpMasking, &std, rev, |v| v >= SUCCESS, ">= 95%"));
            for o in [Objective::Mlm, Objective::NtpMasking] {
                checks.push(metric_check(cells, &format!("{o} never-mask-source fails"), o, &never_source, rev, |v| v <= NEAR_ZERO, "<= 2%"));
            }
            checks.extend(forward_floor_checks(cells, &runs_for(suite)));
        }
        Suite::Fig2 => {
            for policy in enumerate_sweep_policies() {
                let label = policy.label();
                if policy.maskable.contains(Slot::Source) {
                    checks.push(metric_check(cells, &format!("NTP+Masking [{label}] non-zero"), Objective::NtpMasking, &label, rev, |v| v > NONZERO, "> 10%"));
                } else {
                    checks.push(metric_check(cells, &format!("NTP+Masking [{label}] fails"), Objective::NtpMasking, &label, rev, |v| v <= NEAR_ZERO, "<= 2%"));
                }
            }
            let st = SlotSet::of(&[Slot::Source, Slot::Target]);
            let st_label = MaskingPolicy::sweep(st).label();
            let s_label = MaskingPolicy::sweep(SlotSet::of(&[Slot::Source])).label();
            checks.push(metric_check(cells, "MLM [S+T] succeeds", Objective::Mlm, &st_label, rev, |v| v >= SUCCESS, ">= 95%"));
            let ordered = cells.iter().all(|c| {
                match (c.metric(Objective::Mlm, &st_label), c.metric(Objective::Mlm, &s_label)) {
                    (Some(a), Some(b)) => a.reversal_acc > b.reversal_acc,
                    _ => false,
                }
            });
            let detail: Vec<String> = cells
                .iter()
                .map(|c| {
                    let get = |l: &str| c.metric(Objective::Mlm, l).map_or(f64::NAN, |m| 100.0 * m.reversal_acc);
                    format!("seed {}: S+T {:.1}% vs S {:.1}%", c.seed, get(&st_label), get(&s_label))
                })
                .collect();
            checks.push(check("MLM [S+T] beats [S]", ordered, detail.join("; ")));
        }
        Suite::Ablation2 => {
            let ff = |m: &MetricsRow| m.false_frame_acc;
            for o in [Objective::Mlm, Objective::NtpMasking] {
                checks.push(metric_check(cells, &format!("{o} false-frame fails"), o, &std, ff, |v| v <= NEAR_ZERO, "<= 2%"));
            }
        }
        Suite::Ablation3 => {
            let fwd = |m: &MetricsRow| m.forward_acc;
            checks.push(metric_check(cells, "never-mask-target forward fails", Objective::Mlm, &never_target, fwd, |v| v <= NEAR_ZERO, "<= 2%"));
            checks.push(metric_check(cells, "standard MLM forward succeeds", Objective::Mlm, &std, fwd, |v| v >= SUCCESS, ">= 95%"));
        }
        Suite::Fig3 => {
            checks.push(distance_check(cells, Objective::Mlm, "MLM reverse fact farther than masked/unmasked at every layer", |rows| {
                ordered_layers(rows, ReferenceKind::MaskedVsUnmasked, ReferenceKind::ReverseFact)
                    .map(|(n, total)| n == total && total > 0)
            }));
            checks.push(distance_check(cells, Objective::NtpMasking, "NTP+Masking same source closer than unrelated at most layers", |rows| {
                ordered_layers(rows, ReferenceKind::SameSource, ReferenceKind::Unrelated).map(|(n, total)| 2 * n > total)
            }));
        }
        Suite::Fig4 => {
            checks.push(probe_check(cells, Objective::NtpMasking, ControlKind::Unrelated, "NTP+Masking reversal vs unrelated inside null", ProbeRow::inside_null));
            checks.push(probe_check(cells, Objective::Mlm, ControlKind::SameSource, "MLM reversal vs same source inside null", ProbeRow::inside_null));
            let power = cells.iter().all(|c| {
                let mut others = Vec::new();
                for (objective, rows) in &c.probes {
                    for r in rows.iter().filter(|r| r.layer.is_none()) {
                        let primary = (objective == Objective::NtpMasking.as_str() && r.control_kind == ControlKind::Unrelated)
                            || (objective == Objective::Mlm.as_str() && r.control_kind == ControlKind::SameSource);
                        if !primary {
                            others.push(r.above_null());
                        }
                    }
                }
                others.iter().any(|&a| a)
            });
            let detail: Vec<String> = cells
                .iter()
                .flat_map(|c| {
                    c.probes.iter().flat_map(move |(o, rows)| {
                        rows.iter().filter(|r| r.layer.is_none()).map(move |r| {
                            format!("seed {} {o}/{}: {:.3} in [{:.3}, {:.3}]", c.seed, r.control_kind, r.accuracy, r.null_low, r.null_high)
                        })
                    })
                })
                .collect();
            checks.push(check("some other pairing above its null", power && !cells.is_empty(), detail.join("; ")));
        }
    }
    checks
}

/// Layers where `closer` has a strictly smaller mean distance than `farther`,
/// and the number of layers compared.
fn ordered_layers(rows: &[DistanceRow], closer: ReferenceKind, farther: ReferenceKind) -> Option<(usize, usize)> {
    let get = |k: ReferenceKind| -> BTreeMap<usize, f64> {
        rows.iter().filter(|r| r.kind == k).map(|r| (r.layer, r.mean)).collect()
    };
    let (a, b) = (get(closer), get(farther));
    if a.is_empty() || a.len() != b.len() {
        return None;
    }
    let n = a.iter().filter(|(l, v)| b.get(l).is_some_and(|w| *v < w)).count();
    Some((n, a.len()))
}

fn distance_check(
    cells: &[Cell],
    objective: Objective,
    name: &str,
    pass: impl Fn(&[DistanceRow]) -> Option<bool>,
) -> CheckResult {
    let per_seed: Vec<Option<bool>> =
        cells.iter().map(|c| c.distances.get(objective.as_str()).and_then(|rows| pass(rows))).collect();
    let ok = !per_seed.is_empty() && per_seed.iter().all(|p| *p == Some(true));
    let detail: Vec<String> = cells
        .iter()
        .zip(&per_seed)
        .map(|(c, p)| format!("seed {}: {}", c.seed, match p { Some(true) => "ordered", Some(false) => "not ordered", None => "missing" }))
        .collect();
    check(name, ok, detail.join("; "))
}

fn probe_check(
    cells: &[Cell],
    objective: Objective,
    control: ControlKind,
    name: &str,
    pass: fn(&ProbeRow) -> bool,
) -> CheckResult {
    let rows: Vec<Option<&ProbeRow>> = cells
        .iter()
        .map(|c| {
            c.probes
                .get(objective.as_str())
                .and_then(|rows| rows.iter().find(|r| r.layer.is_none() && r.control_kind == control))
        })
        .collect();
    let ok = !rows.is_empty() && rows.iter().all(|r| r.is_some_and(pass));
    let detail: Vec<String> = rows
        .iter()
        .map(|r| match r {
            Some(r) => format!("max-layer accuracy {:.3}, null [{:.3}, {:.3}]", r.accuracy, r.null_low, r.null_high),
            None => "missing".to_string(),
        })
        .collect();
    check(name, ok, detail.join("; "))
}

// ---------------------------------------------------------------------------
// Rendering

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 8] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

fn read_table(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>, ReportError> {
    let mut r = csv::Reader::from_path(path)?;
    let found = r.headers()?.clone();
    for (i, want) in header.iter().enumerate() {
        match found.get(i) {
            Some(h) if h == *want => {}
            Some(h) => {
                return Err(ReportError::Schema {
                    path: path.into(),
                    message: format!("column {} is `{h}`, expected `{want}`", i + 1),
                })
            }
            None => {
                return Err(ReportError::Schema { path: path.into(), message: format!("missing column `{want}`") })
            }
        }
    }
    let rows: Vec<csv::StringRecord> = r.records().collect::<Result<_, _>>()?;
    if rows.is_empty() {
        return Err(ReportError::EmptyPlot(path.into()));
    }
    Ok(rows)
}

fn number(path: &Path, row: &csv::StringRecord, idx: usize, column: &str) -> Result<f64, ReportError> {
    row.get(idx).and_then(|v| v.parse().ok()).ok_or_else(|| ReportError::Schema {
        path: path.into(),
        message: format!("column `{column}` has a non-numeric value `{}`", row.get(idx).unwrap_or("")),
    })
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Svg {
    body: String,
}

impl Svg {
    fn new(title: &str, y_label: &str, y_max: f64) -> Self {
        let mut body = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" font-family=\"sans-serif\" font-size=\"11\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n",
            WIDTH / 2.0,
            escape(title)
        );
        let (x0, y0, y1) = (MARGIN, HEIGHT - MARGIN, MARGIN);
        body.push_str(&format!("<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{}\" y2=\"{y0}\" stroke=\"black\"/>\n", WIDTH - 20.0));
        body.push_str(&format!("<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n"));
        for i in 0..=4 {
            let v = y_max * i as f64 / 4.0;
            let y = y0 - (y0 - y1) * i as f64 / 4.0;
            body.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.2}</text>\n<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/>\n",
                x0 - 5.0,
                y + 4.0,
                x0,
                WIDTH - 20.0
            ));
        }
        body.push_str(&format!(
            "<text x=\"15\" y=\"{}\" transform=\"rotate(-90 15 {})\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(y_label)
        ));
        Self { body }
    }

    fn y(&self, v: f64, y_max: f64) -> f64 {
        let (y0, y1) = (HEIGHT - MARGIN, MARGIN);
        y0 - (y0 - y1) * (v / y_max).clamp(0.0, 1.0)
    }

    fn legend(&mut self, names: &[String]) {
        for (i, name) in names.iter().enumerate() {
            let y = MARGIN + 14.0 * i as f64;
            self.body.push_str(&format!(
                "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/><text x=\"{}\" y=\"{}\">{}</text>\n",
                WIDTH - 170.0,
                y - 9.0,
                PALETTE[i % PALETTE.len()],
                WIDTH - 155.0,
                y,
                escape(name)
            ));
        }
    }

    fn finish(mut self, path: &Path) -> Result<(), ReportError> {
        self.body.push_str("</svg>\n");
        fs::write(path, self.body)?;
        Ok(())
    }
}

fn x_label(svg: &mut Svg, x: f64, text: &str) {
    svg.body.push_str(&format!(
        "<text x=\"{x}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
        HEIGHT - MARGIN + 15.0,
        escape(text)
    ));
}

/// Grouped bars of reversal accuracy by policy, one bar per objective.
pub fn render_metrics(csv_path: &Path, svg_path: &Path) -> Result<(), ReportError> {
    let rows = read_table(csv_path, &METRICS_HEADER)?;
    let mut groups: Vec<String> = Vec::new();
    let mut series: Vec<String> = Vec::new();
    let mut values: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for row in &rows {
        let (policy, objective) = (row[0].to_string(), row[1].to_string());
        let acc = number(csv_path, row, 3, "reversal_acc")?;
        if !groups.contains(&policy) {
            groups.push(policy.clone());
        }
        if !series.contains(&objective) {
            series.push(objective.clone());
        }
        values.entry((policy, objective)).or_default().push(acc);
    }
    let mut svg = Svg::new("Reversal accuracy by masking policy", "reversal accuracy", 1.0);
    let span = (WIDTH - 20.0 - MARGIN) / groups.len() as f64;
    let bar = span * 0.8 / series.len() as f64;
    for (g, policy) in groups.iter().enumerate() {
        let left = MARGIN + span * g as f64 + span * 0.1;
        for (s, objective) in series.iter().enumerate() {
            if let Some(v) = values.get(&(policy.clone(), objective.clone())) {
                let mean = v.iter().sum::<f64>() / v.len() as f64;
                let y = svg.y(mean, 1.0);
                svg.body.push_str(&format!(
                    "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{bar:.1}\" height=\"{:.1}\" fill=\"{}\"/>\n",
                    left + bar * s as f64,
                    HEIGHT - MARGIN - y,
                    PALETTE[s % PALETTE.len()]
                ));
            }
        }
        x_label(&mut svg, left + span * 0.4, policy);
    }
    svg.legend(&series);
    svg.finish(svg_path)
}

/// One line per reference kind: mean cosine distance against layer.
pub fn render_distances(csv_path: &Path, svg_path: &Path) -> Result<(), ReportError> {
    let rows = read_table(csv_path, &analysis::DISTANCES_HEADER)?;
    let mut curves: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    for row in &rows {
        let layer = number(csv_path, row, 0, "layer")?;
        let mean = number(csv_path, row, 2, "mean")?;
        let kind = row[1].to_string();
        match curves.iter_mut().find(|(k, _)| *k == kind) {
            Some((_, pts)) => pts.push((layer, mean)),
            None => curves.push((kind, vec![(layer, mean)])),
        }
    }
    let y_max = curves.iter().flat_map(|(_, p)| p.iter().map(|q| q.1)).fold(0.0f64, f64::max).max(1e-3) * 1.1;
    let n_layers = curves.iter().flat_map(|(_, p)| p.iter().map(|q| q.0)).fold(0.0f64, f64::max) + 1.0;
    let mut svg = Svg::new("Mean cosine distance across layers", "mean cosine distance", y_max);
    let x = |l: f64| MARGIN + 20.0 + (WIDTH - 60.0 - MARGIN - 20.0) * l / (n_layers - 1.0).max(1.0);
    for (i, (_, pts)) in curves.iter().enumerate() {
        let path: Vec<String> = pts.iter().map(|&(l, m)| format!("{:.1},{:.1}", x(l), svg.y(m, y_max))).collect();
        let colour = PALETTE[i % PALETTE.len()];
        svg.body.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"2\"/>\n",
            path.join(" ")
        ));
        for &(l, m) in pts {
            svg.body.push_str(&format!(
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{colour}\"/>\n",
                x(l),
                svg.y(m, y_max)
            ));
        }
    }
    for l in 0..n_layers as usize {
        x_label(&mut svg, x(l as f64), &format!("layer {l}"));
    }
    let names: Vec<String> = curves.into_iter().map(|(k, _)| k).collect();
    svg.legend(&names);
    svg.finish(svg_path)
}

/// Bars of probe accuracy grouped by control kind (one bar per layer and the
/// max-over-layers summary), with the null band drawn as a whisker.
pub fn render_probes(csv_path: &Path, svg_path: &Path) -> Result<(), ReportError> {
    let rows = read_table(csv_path, &analysis::PROBES_HEADER)?;
    let mut groups: Vec<String> = Vec::new();
    let mut layers: Vec<String> = Vec::new();
    let mut bars: BTreeMap<(String, String), (f64, f64, f64)> = BTreeMap::new();
    for row in &rows {
        let (layer, control) = (row[0].to_string(), row[1].to_string());
        let acc = number(csv_path, row, 2, "accuracy")?;
        let lo = number(csv_path, row, 3, "null_low")?;
        let hi = number(csv_path, row, 4, "null_high")?;
        if !groups.contains(&control) {
            groups.push(control.clone());
        }
        if !layers.contains(&layer) {
            layers.push(layer.clone());
        }
        bars.insert((control, layer), (acc, lo, hi));
    }
    let mut svg = Svg::new("Probe accuracy: reversal vs control differences", "test accuracy", 1.0);
    let span = (WIDTH - 20.0 - MARGIN) / groups.len() as f64;
    let bar = span * 0.8 / layers.len() as f64;
    for (g, control) in groups.iter().enumerate() {
        let left = MARGIN + span * g as f64 + span * 0.1;
        for (s, layer) in layers.iter().enumerate() {
            if let Some(&(acc, lo, hi)) = bars.get(&(control.clone(), layer.clone())) {
                let x = left + bar * s as f64;
                let y = svg.y(acc, 1.0);
                svg.body.push_str(&format!(
                    "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar:.1}\" height=\"{:.1}\" fill=\"{}\"/>\n",
                    HEIGHT - MARGIN - y,
                    PALETTE[s % PALETTE.len()]
                ));
                let cx = x + bar / 2.0;
                svg.body.push_str(&format!(
                    "<line x1=\"{cx:.1}\" y1=\"{:.1}\" x2=\"{cx:.1}\" y2=\"{:.1}\" stroke=\"black\" stroke-width=\"2\"/>\n",
                    svg.y(lo, 1.0),
                    svg.y(hi, 1.0)
                ));
            }
        }
        x_label(&mut svg, left + span * 0.4, control);
    }
    let names: Vec<String> = layers.iter().map(|l| format!("layer {l}")).collect();
    svg.legend(&names);
    svg.finish(svg_path)
}

/// Renders each CSV next to itself as `.svg`, choosing the chart by header.
pub fn render(paths: &[PathBuf]) -> Result<Vec<PathBuf>, ReportError> {
    let mut out = Vec::with_capacity(paths.len());
    for p in paths {
        let header: Vec<String> = csv::Reader::from_path(p)?.headers()?.iter().map(str::to_string).collect();
        let svg = p.with_extension("svg");
        match header.first().map(String::as_str) {
            Some("policy") => render_metrics(p, &svg)?,
            Some("layer") if header.get(1).map(String::as_str) == Some("kind") => render_distances(p, &svg)?,
            Some("layer") => render_probes(p, &svg)?,
            _ => {
                return Err(ReportError::Schema {
                    path: p.clone(),
                    message: format!("unrecognized header `{}`", header.join(",")),
                })
            }
        }
        out.push(svg);
    }
    Ok(out)
}
