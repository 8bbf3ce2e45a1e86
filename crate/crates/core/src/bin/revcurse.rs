//! Command-line entry point: corpus generation, training, evaluation,
//! sweeps, ablations, analysis and report suites.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use revcurse::analysis::{self, extract_states, ControlKind, DecoderAnchor, ProbeOptions, ReferenceKind};
use revcurse::corpus::{Corpus, CorpusConfig};
use revcurse::model::Checkpoint;
use revcurse::objectives::{ablation_policy, AblationKind, MaskMode, MaskingPolicy, Objective, SlotSet};
use revcurse::reporting::{
    self, policy_label, run_suite, train_into, write_metrics, MetricsRow, RunManifest, Suite, SuiteConfig, Workspace,
};
use revcurse::training::{eval_reversal, LrSchedule, RunConfig};

#[derive(Parser)]
#[command(name = "revcurse", version, about = "Reversal-curse experiments on synthetic facts")]
struct Cli {
    /// Root output directory.
    #[arg(long, global = true, env = "REVCURSE_OUT", default_value = "revcurse-out")]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a corpus directory.
    Gen(GenArgs),
    /// Train one model and evaluate it.
    Train(TrainArgs),
    /// Evaluate a trained run directory.
    Eval(EvalArgs),
    /// Train one model per masking-sweep policy.
    Sweep(SweepArgs),
    /// Run one of the ablations.
    Ablate(AblateArgs),
    /// Distance and probe analysis of a trained run.
    Analyze(AnalyzeArgs),
    /// Run a named experiment suite; exits nonzero if any check fails.
    Report(ReportArgs),
    /// Render CSV outputs as SVG charts.
    Render { csv: Vec<PathBuf> },
}

#[derive(Clone, Copy, ValueEnum)]
enum CorpusKind {
    SimpleReversal,
    Nonsense,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long, value_enum, default_value = "simple-reversal")]
    kind: CorpusKind,
    #[arg(long, default_value_t = 1000)]
    entities: usize,
    #[arg(long, default_value_t = 20)]
    relations: usize,
    #[arg(long, default_value_t = 200)]
    heldout: usize,
    #[arg(long, default_value_t = 5)]
    max_affix: usize,
    #[arg(long, default_value_t = 100)]
    comparisons: usize,
    #[arg(long, default_value_t = 28)]
    comparison_words: usize,
    #[arg(long, default_value_t = 10)]
    repeats: usize,
    #[arg(long, default_value_t = 0.4)]
    reverse_fraction: f64,
    #[arg(long, default_value_t = 5)]
    max_preamble: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Defaults to `<out-root>/corpus`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Full,
    Desk,
}

impl Preset {
    fn config(self) -> SuiteConfig {
        match self {
            Preset::Full => SuiteConfig::full(),
            Preset::Desk => SuiteConfig::desk(),
        }
    }
}

/// Run settings; unset flags come from the preset.
#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long, value_enum, default_value = "full")]
    preset: Preset,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_mlp: Option<usize>,
    #[arg(long)]
    tie_embeddings: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    warmup_frac: Option<f64>,
    /// constant or linear.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Global gradient-norm clip; 0 disables clipping.
    #[arg(long)]
    clip_norm: Option<f64>,
    /// NTP+Masking: share of plain unmasked examples.
    #[arg(long)]
    plain_fraction: Option<f64>,
    #[arg(long)]
    no_early_stop: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl RunArgs {
    fn build(&self, objective: Objective, policy: MaskingPolicy, corpus: &Corpus) -> Result<RunConfig> {
        let mut t = self.preset.config().run;
        if let Some(v) = self.layers {
            t.n_layers = v;
        }
        if let Some(v) = self.d_model {
            t.d_model = v;
        }
        if let Some(v) = self.heads {
            t.n_heads = v;
        }
        if let Some(v) = self.d_mlp {
            t.d_mlp = v;
        }
        t.tie_embeddings |= self.tie_embeddings;
        if let Some(v) = self.steps {
            t.steps = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.warmup_frac {
            t.warmup_frac = v;
        }
        if let Some(s) = &self.schedule {
            t.schedule = match s.as_str() {
                "constant" => LrSchedule::Constant,
                "linear" => LrSchedule::Linear,
                other => bail!("unknown schedule `{other}` (constant, linear)"),
            };
        }
        if let Some(v) = self.weight_decay {
            t.adam.weight_decay = v;
        }
        if let Some(v) = self.clip_norm {
            t.adam.clip_norm = (v > 0.0).then_some(v);
        }
        if let Some(v) = self.plain_fraction {
            t.plain_fraction = v;
        }
        if self.no_early_stop {
            t.early_stop = None;
        }
        let run = t.run(objective, policy, corpus, self.seed);
        run.validate()?;
        Ok(run)
    }
}

#[derive(Args, Clone)]
struct PolicyArgs {
    /// Maskable slots, e.g. `S+R+T`, `S+T`, `R`.
    #[arg(long, default_value = "S+R+T")]
    policy: String,
    /// exactly-one, slot-pairs, rate:<p> or ratio:<lo>,<hi>. Defaults to the
    /// sweep mode for the slot set.
    #[arg(long)]
    mask_mode: Option<String>,
}

impl PolicyArgs {
    fn build(&self) -> Result<MaskingPolicy> {
        let slots: SlotSet = self.policy.parse().map_err(anyhow::Error::msg)?;
        let Some(mode) = &self.mask_mode else {
            return Ok(if slots == SlotSet::ALL { MaskingPolicy::standard() } else { MaskingPolicy::sweep(slots) });
        };
        let mode = match mode.split_once(':') {
            None if mode == "exactly-one" => MaskMode::ExactlyOneSlot,
            None if mode == "slot-pairs" => MaskMode::SlotPairs,
            Some(("rate", p)) => MaskMode::TokenRate { rate: p.parse().context("mask rate")? },
            Some(("ratio", r)) => {
                let (lo, hi) = r.split_once(',').context("ratio needs `lo,hi`")?;
                MaskMode::RatioRange { lo: lo.parse()?, hi: hi.parse()? }
            }
            _ => bail!("unknown mask mode `{mode}`"),
        };
        Ok(MaskingPolicy::new(slots, mode)?)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    objective: Objective,
    #[command(flatten)]
    policy: PolicyArgs,
    #[command(flatten)]
    run: RunArgs,
    /// Defaults to `<out-root>/runs/<objective>-<policy>-seed<seed>`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Run directory written by `train`.
    #[arg(long)]
    run: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// mlm or ntp+masking; both when omitted.
    #[arg(long)]
    objective: Option<Objective>,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    NeverSource,
    NeverTarget,
    FalseFrame,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(value_enum)]
    kind: Ablation,
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    run: PathBuf,
    /// Anchors per distance curve.
    #[arg(long, default_value_t = 20)]
    n_facts: usize,
    #[arg(long, default_value_t = 100)]
    shuffles: usize,
    /// Anchors per probe dataset; 0 uses all facts.
    #[arg(long, default_value_t = 400)]
    max_anchors: usize,
    /// Decoder state standing for a fact: prompt or full-sequence.
    #[arg(long, default_value = "prompt")]
    decoder_anchor: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    suite: String,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    /// Defaults to the output root.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_corpus(dir: &Path) -> Result<Corpus> {
    Corpus::load(dir).with_context(|| format!("loading corpus from {}", dir.display()))
}

fn load_run(dir: &Path) -> Result<(RunManifest, Checkpoint)> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))
        .with_context(|| format!("reading {}/manifest.json", dir.display()))?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    let ckpt = Checkpoint::load(&dir.join("checkpoint.bin"))?;
    Ok((manifest, ckpt))
}

fn run_dir_name(run: &RunConfig) -> String {
    let policy = policy_label(run.objective, &run.policy).replace(['+', ':', '='], "");
    let objective = run.objective.as_str().replace('+', "-");
    format!("{objective}-{policy}-seed{}", run.seed)
}

fn train_one(root: &Path, corpus: &Corpus, run: &RunConfig) -> Result<MetricsRow> {
    let dir = root.join(run_dir_name(run));
    let (_, report) = train_into(&dir, corpus, run, true)?;
    let row = MetricsRow {
        policy: policy_label(run.objective, &run.policy),
        objective: run.objective,
        seed: run.seed,
        reversal_acc: report.reversal_accuracy,
        forward_acc: report.forward_accuracy,
        false_frame_acc: report.false_frame_accuracy,
    };
    println!(
        "{} [{}] reversal {:.1}% forward {:.1}% false-frame {:.1}%",
        row.objective,
        row.policy,
        100.0 * row.reversal_acc,
        100.0 * row.forward_acc,
        100.0 * row.false_frame_acc
    );
    Ok(row)
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let root = cli.out_root;
    match cli.command {
        Command::Gen(a) => {
            let config = match a.kind {
                CorpusKind::SimpleReversal => CorpusConfig::SimpleReversal {
                    n_entities: a.entities,
                    n_relations: a.relations,
                    n_heldout: a.heldout,
                    max_affix: a.max_affix,
                },
                CorpusKind::Nonsense => CorpusConfig::Nonsense {
                    n_comparisons: a.comparisons,
                    n_comparison_words: a.comparison_words,
                    repeats: a.repeats,
                    reverse_fraction: a.reverse_fraction,
                    max_preamble: a.max_preamble,
                },
            };
            let corpus = config.generate(a.seed)?;
            let out = a.out.unwrap_or_else(|| root.join("corpus"));
            corpus.save(&out)?;
            let m = &corpus.manifest;
            println!(
                "{}: {} facts, {} train documents, {} held out, vocab {}",
                out.display(),
                m.n_facts,
                m.n_train_docs,
                m.n_heldout,
                m.vocab_size
            );
        }
        Command::Train(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let run = a.run.build(a.objective, a.policy.build()?, &corpus)?;
            let dir = a.out.unwrap_or_else(|| root.join("runs").join(run_dir_name(&run)));
            let (ckpt, report) = train_into(&dir, &corpus, &run, true)?;
            println!(
                "{} steps; reversal {:.1}% forward {:.1}% false-frame {:.1}% -> {}",
                ckpt.steps,
                100.0 * report.reversal_accuracy,
                100.0 * report.forward_accuracy,
                100.0 * report.false_frame_accuracy,
                dir.display()
            );
        }
        Command::Eval(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let (manifest, ckpt) = load_run(&a.run)?;
            let report = eval_reversal(&ckpt, &corpus, manifest.run.objective)?;
            let row = MetricsRow {
                policy: policy_label(manifest.run.objective, &manifest.run.policy),
                objective: manifest.run.objective,
                seed: manifest.run.seed,
                reversal_acc: report.reversal_accuracy,
                forward_acc: report.forward_accuracy,
                false_frame_acc: report.false_frame_accuracy,
            };
            write_metrics(&a.run.join("metrics.csv"), std::slice::from_ref(&row))?;
            std::fs::write(a.run.join("eval.json"), serde_json::to_string_pretty(&report)?)?;
            println!(
                "reversal {:.1}% forward {:.1}% false-frame {:.1}%",
                100.0 * row.reversal_acc,
                100.0 * row.forward_acc,
                100.0 * row.false_frame_acc
            );
        }
        Command::Sweep(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let out = a.out.unwrap_or_else(|| root.join("sweep"));
            let objectives = match a.objective {
                Some(Objective::Ntp) => bail!("the sweep needs mlm or ntp+masking"),
                Some(o) => vec![o],
                None => vec![Objective::Mlm, Objective::NtpMasking],
            };
            let mut rows = Vec::new();
            for objective in objectives {
                for policy in revcurse::objectives::enumerate_sweep_policies() {
                    let run = a.run.build(objective, policy, &corpus)?;
                    rows.push(train_one(&out, &corpus, &run)?);
                }
            }
            write_metrics(&out.join("metrics.csv"), &rows)?;
            reporting::render_metrics(&out.join("metrics.csv"), &out.join("metrics.svg"))?;
        }
        Command::Ablate(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let name = match a.kind {
                Ablation::NeverSource => "never-source",
                Ablation::NeverTarget => "never-target",
                Ablation::FalseFrame => "false-frame",
            };
            let out = a.out.unwrap_or_else(|| root.join("ablate").join(name));
            let runs: Vec<(Objective, MaskingPolicy)> = match a.kind {
                Ablation::NeverSource => [Objective::Mlm, Objective::NtpMasking]
                    .into_iter()
                    .map(|o| (o, ablation_policy(AblationKind::NeverMaskSource)))
                    .collect(),
                Ablation::NeverTarget => vec![
                    (Objective::Mlm, ablation_policy(AblationKind::NeverMaskTarget)),
                    (Objective::Mlm, MaskingPolicy::standard()),
                ],
                Ablation::FalseFrame => [Objective::Mlm, Objective::NtpMasking]
                    .into_iter()
                    .map(|o| (o, MaskingPolicy::standard()))
                    .collect(),
            };
            let mut rows = Vec::new();
            for (objective, policy) in runs {
                let run = a.run.build(objective, policy, &corpus)?;
                rows.push(train_one(&out, &corpus, &run)?);
            }
            write_metrics(&out.join("metrics.csv"), &rows)?;
            if matches!(a.kind, Ablation::FalseFrame) {
                let mut w = csv::Writer::from_path(out.join("false_frame.csv"))?;
                w.write_record(["objective", "seed", "false_frame_acc"])?;
                for r in &rows {
                    w.write_record([r.objective.to_string(), r.seed.to_string(), format!("{:.6}", r.false_frame_acc)])?;
                }
                w.flush()?;
            }
        }
        Command::Analyze(a) => {
            let corpus = load_corpus(&a.corpus)?;
            let (manifest, ckpt) = load_run(&a.run)?;
            let anchor = match a.decoder_anchor.as_str() {
                "prompt" => DecoderAnchor::Prompt,
                "full-sequence" => DecoderAnchor::FullSequence,
                other => bail!("unknown decoder anchor `{other}` (prompt, full-sequence)"),
            };
            let out = a.out.unwrap_or_else(|| a.run.join("analysis"));
            std::fs::create_dir_all(&out)?;
            let records = extract_states(&ckpt.params, &corpus.facts, manifest.run.objective, &corpus.vocab, anchor)?;
            let mut distances = Vec::new();
            for kind in ReferenceKind::ALL {
                match analysis::mean_cosine_distance(&corpus.facts, &records, kind, a.n_facts, a.seed) {
                    Ok(rows) => distances.extend(rows),
                    Err(e) => eprintln!("skipping {kind}: {e}"),
                }
            }
            analysis::write_distances(&out.join("distances.csv"), &distances)?;
            let mut opts = ProbeOptions { n_shuffles: a.shuffles, ..ProbeOptions::default() };
            opts.split.max_anchors = (a.max_anchors > 0).then_some(a.max_anchors);
            let mut probes = Vec::new();
            for control in ControlKind::ALL {
                match analysis::probe_layers(&corpus.facts, &records, control, &opts, a.seed) {
                    Ok(rows) => probes.extend(rows),
                    Err(e) => eprintln!("skipping {control} probes: {e}"),
                }
            }
            analysis::write_probes(&out.join("probes.csv"), &probes)?;
            let written = reporting::render(&[out.join("distances.csv"), out.join("probes.csv")])?;
            for p in written {
                println!("{}", p.display());
            }
        }
        Command::Report(a) => {
            let suite: Suite = a.suite.parse()?;
            let out = a.out.unwrap_or(root);
            let mut ws = Workspace::new(out);
            ws.verbose = true;
            let manifest = run_suite(&mut ws, suite, &a.seeds, &a.preset.config())?;
            for c in &manifest.checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            for f in &manifest.failures {
                println!("[FAIL] seed {} stage {}: {}", f.seed, f.stage, f.error);
            }
            if !manifest.passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Render { csv } => {
            if csv.is_empty() {
                bail!("no CSV files given");
            }
            for p in reporting::render(&csv)? {
                println!("{}", p.display());
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}
