//! Command-line driver. Every subcommand writes its outputs under `--out`
//! plus a run manifest (`run.json` in an output directory, `<file>.run.json`
//! next to an output file).

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sluprobe_core::align::{align, label_error_tokens, wer, WerStats};
use sluprobe_core::attn::{
    attention_buckets, dependency_uas, entity_value_accuracy, HeadSelection,
};
use sluprobe_core::model::{Role, Split, UtterancePair};
use sluprobe_core::mtl::{evaluate_transfer, train_mtl, Activation, MtlConfig, Sampling, TransferMode};
use sluprobe_core::probes::{
    dataset_layers, evaluate_probe, featurize, fit, metrics_on, probe_layer, FeatureSource, NgramVocab,
    ProbeReport, TrainConfig,
};
use sluprobe_core::rng::Stream;
use sluprobe_core::store::{RecordKind, TensorStore};
use sluprobe_core::synth::{
    corrupt_indexed, gen_conversations, plant_datasets, plant_dependency_attention, random_dependency_sentence,
    AttentionSpec, CorpusSpec, ErrorRates, FeatureSpec,
};
use sluprobe_core::taskgen::{
    gen_token_error_task, gen_utterance_task, gen_wer_task, ErrorTaskMode, ProbeDataset, TaskConfig, TaskKind,
};

use crate::error::{Error, Result};
use crate::ingest;
use crate::manifest::{write_atomic, RunManifest};
use crate::model_io::{HeadJson, MtlFile, NgramJson, ProbeFile};
use crate::report::{self, BucketRow, DependencyRow, ResultRow, SummaryRow, Table, TransferRow};
use crate::tensor_io::{manifest_path, read_store, resolve_store_path, write_store};

#[derive(Debug, Parser)]
#[command(name = "sluprobe", version, about = "Probe language-model representations of spoken conversations")]
pub struct Cli {
    /// Worker threads for subcommands that parallelise.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: u16,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded synthetic corpus with ASR-corrupted transcripts.
    SynthCorpus(SynthCorpusArgs),
    /// Build a balanced, conversation-disjoint probe dataset.
    GenTasks(GenTasksArgs),
    /// Align reference/hypothesis pairs and report per-pair WER.
    Align(AlignArgs),
    /// Turn labeled utterance files into a probe dataset.
    ImportLabeled(ImportLabeledArgs),
    /// Write a synthetic tensor store with planted structure.
    SynthStore(SynthStoreArgs),
    /// Train one probe on a store layer or on n-gram features.
    TrainProbe(TrainProbeArgs),
    /// Train one probe per layer and pick the best by validation score.
    SweepLayers(SweepLayersArgs),
    /// Dependency, entity-value and attention-bucket analyses.
    AttnReport(AttnReportArgs),
    /// Train a shared trunk with one head per task.
    MtlTrain(MtlTrainArgs),
    /// Evaluate an MTL trunk on external tasks.
    TransferEval(TransferEvalArgs),
    /// Collate result CSVs into markdown tables.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct TrainFlags {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 0.1)]
    pub lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub l2: f64,
}

impl TrainFlags {
    fn config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch,
            learning_rate: self.lr,
            l2_penalty: self.l2,
            seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct SynthCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// JSON file overriding corpus generator fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub conversations: Option<usize>,
    #[arg(long, default_value_t = 0.10)]
    pub p_sub: f64,
    #[arg(long, default_value_t = 0.04)]
    pub p_del: f64,
    #[arg(long, default_value_t = 0.044)]
    pub p_ins: f64,
    /// Intact reference words forced after each planted ASR error.
    #[arg(long, default_value_t = 0)]
    pub min_gap: usize,
}

/// Optional overrides for the corpus generator, read from `--config`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_conversations: Option<usize>,
    pub turns_per_conv: Option<(usize, usize)>,
    pub tokens_per_turn: Option<(usize, usize)>,
    pub pause_rate: Option<f64>,
    pub overtalk_rate: Option<f64>,
    pub disfluency_rate: Option<f64>,
    pub fluent_cue_rate: Option<f64>,
    pub question_rate: Option<[f64; 4]>,
    pub continue_rate: Option<f64>,
    pub long_turn_rate: Option<f64>,
}

impl CorpusConfig {
    fn apply(&self, spec: &mut CorpusSpec) {
        macro_rules! set {
            ($($f:ident),*) => {$(if let Some(v) = self.$f { spec.$f = v; })*};
        }
        set!(
            n_conversations,
            turns_per_conv,
            tokens_per_turn,
            pause_rate,
            overtalk_rate,
            disfluency_rate,
            fluent_cue_rate,
            question_rate,
            continue_rate,
            long_turn_rate
        );
    }
}

fn parse_task_name(s: &str) -> std::result::Result<String, String> {
    let ok = TaskKind::parse(s).is_some() || matches!(s, "error_binary" | "error_multiclass" | "wer");
    if ok {
        Ok(s.to_string())
    } else {
        Err(format!(
            "unknown task {s:?}; expected one of {}, error_binary, error_multiclass, wer",
            TaskKind::ALL.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(", ")
        ))
    }
}

fn parse_role(s: &str) -> std::result::Result<String, String> {
    Role::parse(s).map(|r| r.as_str().to_string()).ok_or_else(|| format!("unknown role {s:?}"))
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct GenTasksArgs {
    #[arg(long, value_parser = parse_task_name)]
    pub task: String,
    /// Conversations JSONL, or ASR pairs JSONL for error_binary,
    /// error_multiclass and wer.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub train: usize,
    #[arg(long, default_value_t = 2_000)]
    pub val: usize,
    #[arg(long, default_value_t = 2_000)]
    pub test: usize,
    #[arg(long, default_value_t = 5_000)]
    pub pause_ms: u64,
    #[arg(long, default_value_t = 30_000)]
    pub long_ms: u64,
    #[arg(long, value_delimiter = ',', default_value = "agent,customer", value_parser = parse_role)]
    pub roles: Vec<String>,
    #[arg(long, default_value_t = 5.0)]
    pub trim_lo: f64,
    #[arg(long, default_value_t = 95.0)]
    pub trim_hi: f64,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct AlignArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct ImportLabeledArgs {
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub valid: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum StoreKind {
    /// Utterance or token vectors planted from one or more datasets.
    Features,
    /// Attention matrices with one planted dependency head.
    Dependency,
}

fn parse_cell(s: &str) -> std::result::Result<(u32, u32), String> {
    let (l, h) = s.split_once(',').ok_or("expected LAYER,HEAD")?;
    Ok((
        l.trim().parse().map_err(|e| format!("layer: {e}"))?,
        h.trim().parse().map_err(|e| format!("head: {e}"))?,
    ))
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct SynthStoreArgs {
    #[arg(long, value_enum)]
    pub kind: StoreKind,
    /// Output store; the manifest goes next to it as `<stem>.manifest.jsonl`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    /// Dataset directories to plant (features).
    #[arg(long = "dataset", required_if_eq("kind", "features"))]
    pub datasets: Vec<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub dim: usize,
    /// Highest layer index; layers 0..=N are written.
    #[arg(long, default_value_t = 4)]
    pub layers: u32,
    #[arg(long, default_value_t = 2)]
    pub informative_layer: u32,
    #[arg(long, default_value_t = 4.0)]
    pub separation: f64,
    #[arg(long, default_value_t = 1.0)]
    pub noise: f64,
    /// Dependency file whose sentences get attention matrices.
    #[arg(long, conflicts_with = "sentences")]
    pub deps: Option<PathBuf>,
    /// Generate this many random dependency sentences instead; they are
    /// written to `<stem>.deps.tsv` next to the store.
    #[arg(long)]
    pub sentences: Option<usize>,
    #[arg(long, default_value_t = 12)]
    pub sentence_len: usize,
    #[arg(long, default_value_t = 4)]
    pub heads: u32,
    /// Planted dependency cell as LAYER,HEAD.
    #[arg(long, value_parser = parse_cell)]
    pub planted: Option<(u32, u32)>,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct TrainProbeArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    #[arg(long, conflicts_with = "ngrams", required_unless_present = "ngrams", requires = "layer")]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub layer: Option<u32>,
    /// Use bag-of-n-gram features instead of a store.
    #[arg(long)]
    pub ngrams: bool,
    #[arg(long, default_value_t = 4)]
    pub n_max: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct SweepLayersArgs {
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<PathBuf>,
    #[arg(long)]
    pub store: PathBuf,
    /// Result CSV; a markdown summary is written next to it.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct AttnReportArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub deps: Option<PathBuf>,
    #[arg(long)]
    pub spans: Option<PathBuf>,
    #[arg(long)]
    pub segments: Option<PathBuf>,
    /// Layer for the entity-value analysis (default: the last layer).
    #[arg(long)]
    pub layer: Option<u32>,
    /// Single head for the entity-value analysis (default: max over heads).
    #[arg(long, requires = "layer")]
    pub head: Option<u32>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum ActivationArg {
    Identity,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, Serialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum SamplingArg {
    RoundRobin,
    Proportional,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct MtlTrainArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    pub tasks: Vec<String>,
    /// Directory holding one dataset directory per task name.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    /// Store layer (default: the last utterance layer).
    #[arg(long)]
    pub layer: Option<u32>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub width: usize,
    #[arg(long, value_enum, default_value_t = ActivationArg::Tanh)]
    pub activation: ActivationArg,
    #[arg(long, value_enum, default_value_t = SamplingArg::RoundRobin)]
    pub sampling: SamplingArg,
    #[arg(long, default_value_t = 1.0)]
    pub init_scale: f64,
    #[command(flatten)]
    pub train: TrainFlags,
}

#[derive(Debug, Clone, Copy, Serialize, ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum TransferModeArg {
    #[value(name = "frozen_trunk_new_head")]
    FrozenTrunkNewHead,
    #[value(name = "frozen_everything")]
    FrozenEverything,
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct TransferEvalArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long = "dataset", required = true)]
    pub datasets: Vec<PathBuf>,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, value_enum, default_value_t = TransferModeArg::FrozenTrunkNewHead)]
    pub mode: TransferModeArg,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: u64,
    #[command(flatten)]
    pub train: TrainFlags,
}

fn parse_named(s: &str) -> std::result::Result<(String, PathBuf), String> {
    match s.split_once('=') {
        Some((n, p)) if !n.is_empty() && !p.is_empty() => Ok((n.to_string(), PathBuf::from(p))),
        _ => Err(format!("expected NAME=PATH, got {s:?}")),
    }
}

#[derive(Debug, Clone, Serialize, Args)]
pub struct ReportArgs {
    /// Probe result CSV per model, as NAME=PATH; columns keep this order.
    #[arg(long = "probe", value_parser = parse_named)]
    pub probes: Vec<(String, PathBuf)>,
    /// Dependency CSV from attn-report, as NAME=PATH.
    #[arg(long = "deps", value_parser = parse_named)]
    pub deps: Vec<(String, PathBuf)>,
    /// Summary CSV from attn-report, as NAME=PATH.
    #[arg(long = "entity", value_parser = parse_named)]
    pub entity: Vec<(String, PathBuf)>,
    /// Transfer CSV from transfer-eval, as NAME=PATH.
    #[arg(long = "transfer", value_parser = parse_named)]
    pub transfer: Vec<(String, PathBuf)>,
    /// Bucket CSV from attn-report, as NAME=PATH.
    #[arg(long = "buckets", value_parser = parse_named)]
    pub buckets: Vec<(String, PathBuf)>,
    /// N-gram baseline result CSV.
    #[arg(long)]
    pub baseline: Option<PathBuf>,
    /// Header of the difference column (last model minus the one before).
    #[arg(long, default_value = "delta")]
    pub delta_name: String,
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit code: 0 on success, 1 on a runtime error, 2 on a usage error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = e.print();
                    0
                }
                ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    eprintln!("error: missing subcommand or arguments; try --help");
                    2
                }
                _ => {
                    eprintln!("{}", one_line(&e.render().to_string()));
                    2
                }
            };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

/// First line of a clap diagnostic, with the continuation lines of a list
/// (e.g. missing arguments) folded in.
fn one_line(text: &str) -> String {
    let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
    let mut out = lines.next().unwrap_or("usage error").to_string();
    if out.ends_with(':') {
        let rest: Vec<&str> = lines.take_while(|l| !l.starts_with("Usage:")).collect();
        out.push(' ');
        out.push_str(&rest.join(", "));
    }
    out
}

pub fn execute(cli: Cli) -> Result<()> {
    let jobs = cli.jobs as usize;
    match cli.command {
        Command::SynthCorpus(a) => synth_corpus(&a),
        Command::GenTasks(a) => gen_tasks(&a),
        Command::Align(a) => align_cmd(&a),
        Command::ImportLabeled(a) => import_labeled(&a),
        Command::SynthStore(a) => synth_store(&a),
        Command::TrainProbe(a) => train_probe_cmd(&a),
        Command::SweepLayers(a) => sweep_layers_cmd(&a, jobs),
        Command::AttnReport(a) => attn_report(&a),
        Command::MtlTrain(a) => mtl_train(&a),
        Command::TransferEval(a) => transfer_eval(&a),
        Command::Report(a) => report_cmd(&a),
    }
}

fn config_of<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).unwrap_or(serde_json::Value::Null)
}

fn mkdir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_with<F>(path: &Path, f: F) -> Result<()>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}

fn load_store(path: &Path) -> Result<(PathBuf, TensorStore)> {
    let path = resolve_store_path(path);
    let store = read_store(&path)?;
    Ok((path, store))
}

fn record_store_input(m: &mut RunManifest, bin: &Path) -> Result<()> {
    m.input(bin)?;
    m.input(&manifest_path(bin))
}

fn synth_corpus(a: &SynthCorpusArgs) -> Result<()> {
    let mut spec = CorpusSpec {
        seed: a.seed,
        ..CorpusSpec::default()
    };
    let mut m = RunManifest::new("synth-corpus", serde_json::Value::Null, Some(a.seed));
    if let Some(path) = &a.config {
        let cfg: CorpusConfig = serde_json::from_reader(ingest::open(path)?)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        cfg.apply(&mut spec);
        m.input(path)?;
    }
    if let Some(n) = a.conversations {
        spec.n_conversations = n;
    }
    let rates = ErrorRates::new(a.p_sub, a.p_del, a.p_ins)?.with_min_gap(a.min_gap);
    let corpus = gen_conversations(&spec)?;

    let mut pairs = Vec::new();
    for conv in &corpus.conversations {
        for (i, turn) in conv.turns.iter().enumerate() {
            let reference: Vec<String> = turn.tokens.iter().map(|t| t.text.clone()).collect();
            if reference.is_empty() {
                continue;
            }
            let (hypothesis, _) = corrupt_indexed(&reference, &rates, a.seed, pairs.len() as u64);
            pairs.push(UtterancePair {
                id: format!("{}:t{i}", conv.id),
                reference,
                hypothesis,
            });
        }
    }

    mkdir(&a.out)?;
    let convs = a.out.join("convs.jsonl");
    let pairs_path = a.out.join("pairs.jsonl");
    let gold = a.out.join("gold.jsonl");
    write_with(&convs, |w| ingest::write_conversations(w, &corpus.conversations))?;
    write_with(&pairs_path, |w| ingest::write_pairs(w, &pairs))?;
    write_with(&gold, |w| ingest::write_gold(w, &corpus.gold))?;

    m.config = serde_json::json!({
        "corpus": {
            "n_conversations": spec.n_conversations,
            "turns_per_conv": spec.turns_per_conv,
            "tokens_per_turn": spec.tokens_per_turn,
            "pause_rate": spec.pause_rate,
            "overtalk_rate": spec.overtalk_rate,
            "disfluency_rate": spec.disfluency_rate,
            "fluent_cue_rate": spec.fluent_cue_rate,
            "question_rate": spec.question_rate,
            "continue_rate": spec.continue_rate,
            "long_turn_rate": spec.long_turn_rate,
        },
        "asr": { "p_sub": rates.p_sub, "p_del": rates.p_del, "p_ins": rates.p_ins, "min_gap": rates.min_gap },
    });
    for p in [&convs, &pairs_path, &gold] {
        m.output(p)?;
    }
    m.write_for(&a.out)?;
    Ok(())
}

fn gen_tasks(a: &GenTasksArgs) -> Result<()> {
    let config = TaskConfig {
        pause_threshold_ms: a.pause_ms,
        response_long_threshold_ms: a.long_ms,
        duration_trim_percentiles: (a.trim_lo, a.trim_hi),
        split_sizes: [a.train, a.val, a.test],
        roles: a.roles.iter().filter_map(|r| Role::parse(r)).collect(),
        seed: a.seed,
        ..TaskConfig::default()
    };
    let dataset = match a.task.as_str() {
        "error_binary" => gen_token_error_task(&read_pairs(&a.input)?, ErrorTaskMode::Binary, &config)?,
        "error_multiclass" => gen_token_error_task(&read_pairs(&a.input)?, ErrorTaskMode::Multiclass, &config)?,
        "wer" => gen_wer_task(&read_pairs(&a.input)?, &config)?,
        name => {
            let kind = TaskKind::parse(name).ok_or_else(|| Error::Format(format!("unknown task {name}")))?;
            let convs = ingest::parse_conversations(ingest::open(&a.input)?)?;
            gen_utterance_task(kind, &convs, &config)?
        }
    };
    ingest::write_dataset(&dataset, &a.out)?;
    let mut m = RunManifest::new("gen-tasks", config_of(a), Some(a.seed));
    m.input(&a.input)?;
    m.output(&a.out)?;
    m.write_for(&a.out)?;
    Ok(())
}

fn read_pairs(path: &Path) -> Result<Vec<UtterancePair>> {
    ingest::parse_pairs(ingest::open(path)?)
}

#[derive(Debug, Serialize)]
struct AlignRow<'a> {
    id: &'a str,
    n_ref: usize,
    #[serde(rename = "S")]
    s: usize,
    #[serde(rename = "D")]
    d: usize,
    #[serde(rename = "I")]
    i: usize,
    wer: String,
}

#[derive(Debug, Serialize)]
struct TokenRow<'a> {
    id: &'a str,
    position: usize,
    token: &'a str,
    label: &'static str,
}

fn align_cmd(a: &AlignArgs) -> Result<()> {
    let pairs = read_pairs(&a.input)?;
    let mut stats: Vec<WerStats> = Vec::with_capacity(pairs.len());
    let mut rows = Vec::with_capacity(pairs.len());
    let mut tokens = Vec::new();
    for p in &pairs {
        let ops = align(&p.reference, &p.hypothesis);
        let s = wer(&ops, p.reference.len())?;
        for t in label_error_tokens(&ops, p.hypothesis.len())? {
            tokens.push(TokenRow {
                id: &p.id,
                position: t.hyp_index,
                token: p.hypothesis.get(t.hyp_index).map_or("", String::as_str),
                label: t.label.as_str(),
            });
        }
        rows.push(AlignRow {
            id: &p.id,
            n_ref: s.n_ref,
            s: s.substitutions,
            d: s.deletions,
            i: s.insertions,
            wer: format!("{:.2}", s.wer),
        });
        stats.push(s);
    }
    let tokens_path = sibling(&a.out, "tokens.csv");
    write_with(&a.out, |w| report::write_rows(w, &rows))?;
    write_with(&tokens_path, |w| report::write_rows(w, &tokens))?;
    if !stats.is_empty() {
        let pooled = WerStats::pooled(&stats)?;
        eprintln!("{} pairs, corpus WER {:.2}", stats.len(), pooled.wer);
    }
    let mut m = RunManifest::new("align", config_of(a), None);
    m.input(&a.input)?;
    m.output(&a.out)?;
    m.output(&tokens_path)?;
    m.write_for(&a.out)?;
    Ok(())
}

/// `dir/name.csv` + `suffix` -> `dir/name.suffix`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn import_labeled(a: &ImportLabeledArgs) -> Result<()> {
    let read = |p: &Path| ingest::parse_labeled_utterances(ingest::open(p)?);
    let (train, valid, test) = (read(&a.train)?, read(&a.valid)?, read(&a.test)?);
    let dataset = ingest::labeled_dataset(&a.task, [&train, &valid, &test], 0);
    ingest::write_dataset(&dataset, &a.out)?;
    let mut m = RunManifest::new("import-labeled", config_of(a), None);
    for p in [&a.train, &a.valid, &a.test] {
        m.input(p)?;
    }
    m.output(&a.out)?;
    m.write_for(&a.out)?;
    Ok(())
}

fn synth_store(a: &SynthStoreArgs) -> Result<()> {
    let mut m = RunManifest::new("synth-store", config_of(a), Some(a.seed));
    let mut extra = Vec::new();
    let store = match a.kind {
        StoreKind::Features => {
            let datasets = a
                .datasets
                .iter()
                .map(|d| ingest::read_dataset(d))
                .collect::<Result<Vec<_>>>()?;
            for d in &a.datasets {
                m.input(d)?;
            }
            let spec = FeatureSpec {
                classes: Vec::new(),
                dim: a.dim,
                separation: a.separation,
                noise_sigma: a.noise,
                n_per_class: 0,
                layers: a.layers,
                informative_layer: a.informative_layer,
                seed: a.seed,
            };
            let refs: Vec<&ProbeDataset> = datasets.iter().collect();
            plant_datasets(&refs, &spec)?
        }
        StoreKind::Dependency => {
            let sentences = match (&a.deps, a.sentences) {
                (Some(path), _) => {
                    m.input(path)?;
                    ingest::parse_dependencies(ingest::open(path)?)?
                }
                (None, Some(n)) => {
                    let relations = ["nsubj", "obj", "det", "amod", "advmod", "case", "nmod", "aux", "mark", "conj"];
                    let mut rng = Stream::new(a.seed, sluprobe_core::rng::tags::ATTENTION, u64::MAX);
                    let sents: Vec<_> = (0..n)
                        .map(|_| random_dependency_sentence(a.sentence_len.max(2), &relations, &mut rng))
                        .collect();
                    let path = sibling(&a.out, "deps.tsv");
                    write_with(&path, |w| ingest::write_dependencies(w, &sents))?;
                    extra.push(path);
                    sents
                }
                (None, None) => {
                    return Err(Error::Format("dependency stores need --deps or --sentences".into()))
                }
            };
            let spec = AttentionSpec {
                layers: a.layers,
                heads: a.heads,
                planted: a.planted,
                seed: a.seed,
            };
            plant_dependency_attention(&ingest::with_sentence_ids(sentences), &spec)?
        }
    };
    write_store(&store, &a.out)?;
    m.output(&a.out)?;
    m.output(&manifest_path(&a.out))?;
    for p in &extra {
        m.output(p)?;
    }
    m.write_for(&a.out)?;
    Ok(())
}

fn train_probe_cmd(a: &TrainProbeArgs) -> Result<()> {
    let dataset = ingest::read_dataset(&a.dataset)?;
    let config = a.train.config(a.seed);
    let mut m = RunManifest::new("train-probe", config_of(a), Some(a.seed));
    m.input(&a.dataset)?;

    let (file, layer_name, valid, test) = if let (Some(store_path), Some(layer)) = (&a.store, a.layer) {
        let (bin, store) = load_store(store_path)?;
        record_store_input(&mut m, &bin)?;
        let source = || FeatureSource::Store { store: &store, layer };
        let f = featurize(&dataset, source())?;
        let (model, _) = fit(&dataset.label_set, f.dim, f.get(Split::Train), f.get(Split::Valid), &config)?;
        let valid = metrics_on(&model, f.get(Split::Valid));
        let test = evaluate_probe(&model, &dataset, Split::Test, source())?;
        let file = ProbeFile {
            task: dataset.task.clone(),
            layer: Some(layer),
            ngrams: None,
            head: HeadJson::from_model(&model),
        };
        (file, layer.to_string(), valid, test)
    } else {
        let vocab = NgramVocab::fit_dataset(&dataset, a.n_max);
        let f = featurize(&dataset, FeatureSource::Ngrams(&vocab))?;
        let (model, _) = fit(&dataset.label_set, f.dim, f.get(Split::Train), f.get(Split::Valid), &config)?;
        let valid = metrics_on(&model, f.get(Split::Valid));
        let test = evaluate_probe(&model, &dataset, Split::Test, FeatureSource::Ngrams(&vocab))?;
        let file = ProbeFile {
            task: dataset.task.clone(),
            layer: None,
            ngrams: Some(NgramJson::from_vocab(&vocab)),
            head: HeadJson::from_model(&model),
        };
        (file, "ngram".to_string(), valid, test)
    };

    mkdir(&a.out)?;
    let model_path = a.out.join("model.json");
    let results = a.out.join("results.csv");
    let md = a.out.join("results.md");
    let rows = report::single_result_rows(&dataset.task, &layer_name, &valid, &test);
    write_with(&model_path, |w| Ok(serde_json::to_writer_pretty(w, &file)?))?;
    write_with(&results, |w| report::write_rows(w, &rows))?;
    let mut t = Table::new(&["task", "layer", "split", "metric", "value"]);
    for r in &rows {
        t.push(vec![
            r.task.clone(),
            r.layer.clone(),
            r.split.clone(),
            r.metric.clone(),
            report::fmt_metric(&r.metric, r.value),
        ]);
    }
    let text = t.markdown() + &report::training_note(&config);
    write_atomic(&md, text.as_bytes())?;
    for p in [&model_path, &results, &md] {
        m.output(p)?;
    }
    m.write_for(&a.out)?;
    Ok(())
}

fn sweep_layers_cmd(a: &SweepLayersArgs, jobs: usize) -> Result<()> {
    let datasets = a
        .datasets
        .iter()
        .map(|d| ingest::read_dataset(d))
        .collect::<Result<Vec<_>>>()?;
    let (bin, store) = load_store(&a.store)?;
    let config = a.train.config(a.seed);
    config.validate()?;

    let mut work = Vec::new();
    for (i, ds) in datasets.iter().enumerate() {
        for layer in dataset_layers(ds, &store)? {
            work.push((i, layer));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::Format(format!("thread pool: {e}")))?;
    let results = pool.install(|| {
        work.par_iter()
            .map(|&(i, layer)| probe_layer(&datasets[i], &store, layer, &config).map(|r| (i, r)))
            .collect::<std::result::Result<Vec<_>, _>>()
    })?;

    let mut reports = Vec::with_capacity(datasets.len());
    for (i, ds) in datasets.iter().enumerate() {
        let per_layer = results.iter().filter(|(j, _)| *j == i).map(|(_, r)| r.clone()).collect();
        reports.push(ProbeReport::from_layers(&ds.task, per_layer)?);
    }
    let rows: Vec<ResultRow> = reports.iter().flat_map(report::sweep_result_rows).collect();
    let md = a.out.with_extension("md");
    write_with(&a.out, |w| report::write_rows(w, &rows))?;
    let text = report::sweep_markdown(&reports) + &report::training_note(&config);
    write_atomic(&md, text.as_bytes())?;

    let mut m = RunManifest::new("sweep-layers", config_of(a), Some(a.seed));
    for d in &a.datasets {
        m.input(d)?;
    }
    record_store_input(&mut m, &bin)?;
    m.output(&a.out)?;
    m.output(&md)?;
    m.write_for(&a.out)?;
    Ok(())
}

fn attn_report(a: &AttnReportArgs) -> Result<()> {
    let (bin, store) = load_store(&a.store)?;
    let mut m = RunManifest::new("attn-report", config_of(a), None);
    record_store_input(&mut m, &bin)?;
    mkdir(&a.out)?;
    let mut outputs = Vec::new();
    let mut summary = Vec::new();
    let mut md = String::new();

    if let Some(path) = &a.deps {
        m.input(path)?;
        let sentences = ingest::with_sentence_ids(ingest::parse_dependencies(ingest::open(path)?)?);
        let rep = dependency_uas(&store, &sentences)?;
        let rows = report::dependency_rows(&rep);
        let out = a.out.join("dependency.csv");
        write_with(&out, |w| report::write_rows(w, &rows))?;
        outputs.push(out);
        summary.push(SummaryRow {
            metric: "uas_all".into(),
            value: rep.all_micro.uas,
        });
        summary.push(SummaryRow {
            metric: "uas_all_macro".into(),
            value: rep.all_macro,
        });
        md.push_str("## Dependency UAS\n\n");
        md.push_str(&report::dependency_table(&[("model".into(), rows)], "delta").markdown());
        md.push('\n');
    }

    let last_layer = store.layers(RecordKind::Attention).last().copied();
    if let Some(path) = &a.spans {
        m.input(path)?;
        let pairs = ingest::parse_span_pairs(ingest::open(path)?)?;
        let layer = a
            .layer
            .or(last_layer)
            .ok_or_else(|| Error::Format("store has no attention records".into()))?;
        let selection = match a.head {
            Some(head) => HeadSelection::Single { layer, head },
            None => HeadSelection::MaxPooled { layer },
        };
        let rep = entity_value_accuracy(&store, &pairs, selection)?;
        let out = a.out.join("entity.csv");
        write_with(&out, |w| report::write_rows(w, &report::entity_rows(&rep)))?;
        outputs.push(out);
        summary.push(SummaryRow {
            metric: "entity_value_accuracy".into(),
            value: rep.accuracy,
        });
    }

    if let Some(path) = &a.segments {
        m.input(path)?;
        let segs = ingest::parse_segmentations(ingest::open(path)?)?;
        let b = attention_buckets(&store, &segs)?;
        let rows = report::bucket_rows(&b);
        let out = a.out.join("buckets.csv");
        write_with(&out, |w| report::write_rows(w, &rows))?;
        outputs.push(out);
        if let Some(last) = b.layers.last() {
            summary.push(SummaryRow {
                metric: "isa_percent".into(),
                value: last.buckets.isa_percent(),
            });
        }
        md.push_str("## Attention buckets by layer\n\n");
        md.push_str(&report::attention_curves(&[("model".into(), rows)]).markdown());
        md.push('\n');
    }

    let out = a.out.join("summary.csv");
    write_with(&out, |w| report::write_rows(w, &summary))?;
    outputs.push(out);
    if summary.iter().any(|r| r.metric == "entity_value_accuracy" || r.metric == "isa_percent") {
        md.push_str("## Entity-value attention\n\n");
        md.push_str(&report::entity_table(&[("model".into(), summary.clone())]).markdown());
    }
    let out = a.out.join("report.md");
    write_atomic(&out, md.as_bytes())?;
    outputs.push(out);

    for p in &outputs {
        m.output(p)?;
    }
    m.write_for(&a.out)?;
    Ok(())
}

fn mtl_train(a: &MtlTrainArgs) -> Result<()> {
    let (bin, store) = load_store(&a.store)?;
    let layer = match a.layer {
        Some(l) => l,
        None => store
            .layers(RecordKind::UtteranceVec)
            .last()
            .copied()
            .ok_or_else(|| Error::Format("store has no utterance vectors".into()))?,
    };
    let dirs: Vec<PathBuf> = a.tasks.iter().map(|t| a.data.join(t)).collect();
    let datasets = dirs.iter().map(|d| ingest::read_dataset(d)).collect::<Result<Vec<_>>>()?;
    let config = MtlConfig {
        width: a.width,
        activation: match a.activation {
            ActivationArg::Identity => Activation::Identity,
            ActivationArg::Tanh => Activation::Tanh,
            ActivationArg::Relu => Activation::Relu,
        },
        epochs: a.train.epochs,
        batch_size: a.train.batch,
        learning_rate: a.train.lr,
        l2_penalty: a.train.l2,
        sampling: match a.sampling {
            SamplingArg::RoundRobin => Sampling::RoundRobin,
            SamplingArg::Proportional => Sampling::Proportional,
        },
        init_scale: a.init_scale,
        seed: a.seed,
    };
    let refs: Vec<&ProbeDataset> = datasets.iter().collect();
    let source = || FeatureSource::Store { store: &store, layer };
    let run = train_mtl(&refs, source(), &config)?;

    let head_config = a.train.config(a.seed);
    let mut rows = Vec::new();
    for ds in &datasets {
        let metrics = evaluate_transfer(&run.model, ds, source(), TransferMode::FrozenEverything, &head_config)?;
        let mut r = report::single_result_rows(&ds.task, &layer.to_string(), &metrics, &metrics);
        r.retain(|r| r.split == "test");
        rows.extend(r);
    }

    #[derive(Serialize)]
    struct HistoryRow {
        epoch: usize,
        train_loss: f64,
        task: String,
        valid_loss: f64,
    }
    let history: Vec<HistoryRow> = run
        .history
        .iter()
        .flat_map(|e| {
            datasets.iter().zip(&e.valid_loss).map(move |(ds, &v)| HistoryRow {
                epoch: e.epoch,
                train_loss: e.train_loss,
                task: ds.task.clone(),
                valid_loss: v,
            })
        })
        .collect();

    let file = MtlFile::from_model(&run.model, layer);
    let history_path = sibling(&a.out, "history.csv");
    let results_path = sibling(&a.out, "results.csv");
    let md_path = sibling(&a.out, "results.md");
    write_with(&a.out, |w| Ok(serde_json::to_writer_pretty(w, &file)?))?;
    write_with(&history_path, |w| report::write_rows(w, &history))?;
    write_with(&results_path, |w| report::write_rows(w, &rows))?;
    let mut t = Table::new(&["task", "metric", "test"]);
    for r in &rows {
        t.push(vec![r.task.clone(), r.metric.clone(), report::fmt_metric(&r.metric, r.value)]);
    }
    let md = format!(
        "{}\nShared trunk: width {}, {} activation, layer {layer}. Training: {} epochs, batch {}, \
         learning rate {}, L2 {}, seed {}; task losses weighted uniformly.\n",
        t.markdown(),
        config.width,
        config.activation.as_str(),
        config.epochs,
        config.batch_size,
        config.learning_rate,
        config.l2_penalty,
        config.seed,
    );
    write_atomic(&md_path, md.as_bytes())?;

    let mut m = RunManifest::new("mtl-train", config_of(a), Some(a.seed));
    for d in &dirs {
        m.input(d)?;
    }
    record_store_input(&mut m, &bin)?;
    m.output(&a.out)?;
    m.output(&history_path)?;
    m.output(&results_path)?;
    m.output(&md_path)?;
    m.write_for(&a.out)?;
    Ok(())
}

fn transfer_eval(a: &TransferEvalArgs) -> Result<()> {
    let file: MtlFile = serde_json::from_reader(ingest::open(&a.model)?)
        .map_err(|e| Error::Format(format!("{}: {e}", a.model.display())))?;
    let model = file.to_model()?;
    let (bin, store) = load_store(&a.store)?;
    let mode = match a.mode {
        TransferModeArg::FrozenTrunkNewHead => TransferMode::FrozenTrunkNewHead,
        TransferModeArg::FrozenEverything => TransferMode::FrozenEverything,
    };
    let config = a.train.config(a.seed);
    let mut rows = Vec::new();
    for dir in &a.datasets {
        let ds = ingest::read_dataset(dir)?;
        let metrics = evaluate_transfer(
            &model,
            &ds,
            FeatureSource::Store {
                store: &store,
                layer: file.layer,
            },
            mode,
            &config,
        )?;
        rows.push(TransferRow {
            task: ds.task.clone(),
            mode: mode.as_str().into(),
            accuracy: metrics.accuracy.unwrap_or(f64::NAN),
            macro_f1: metrics.macro_f1.unwrap_or(f64::NAN),
            n: metrics.n,
        });
    }
    write_with(&a.out, |w| report::write_rows(w, &rows))?;
    let mut m = RunManifest::new("transfer-eval", config_of(a), Some(a.seed));
    m.input(&a.model)?;
    for d in &a.datasets {
        m.input(d)?;
    }
    record_store_input(&mut m, &bin)?;
    m.output(&a.out)?;
    m.write_for(&a.out)?;
    Ok(())
}

fn read_named<T: for<'de> Deserialize<'de>>(items: &[(String, PathBuf)], m: &mut RunManifest) -> Result<Vec<(String, Vec<T>)>> {
    items
        .iter()
        .map(|(name, path)| {
            m.input(path)?;
            Ok((name.clone(), report::read_rows(ingest::open(path)?)?))
        })
        .collect()
}

fn report_cmd(a: &ReportArgs) -> Result<()> {
    let mut m = RunManifest::new("report", config_of(a), None);
    let probes: Vec<(String, Vec<ResultRow>)> = read_named(&a.probes, &mut m)?;
    let deps: Vec<(String, Vec<DependencyRow>)> = read_named(&a.deps, &mut m)?;
    let entity: Vec<(String, Vec<SummaryRow>)> = read_named(&a.entity, &mut m)?;
    let transfer: Vec<(String, Vec<TransferRow>)> = read_named(&a.transfer, &mut m)?;
    let buckets: Vec<(String, Vec<BucketRow>)> = read_named(&a.buckets, &mut m)?;
    let baseline: Option<Vec<ResultRow>> = match &a.baseline {
        Some(p) => {
            m.input(p)?;
            Some(report::read_rows(ingest::open(p)?)?)
        }
        None => None,
    };

    mkdir(&a.out)?;
    let mut md = String::new();
    let mut tables: Vec<(&str, &str, Table)> = Vec::new();
    if !probes.is_empty() {
        tables.push(("Probing results", "probing.csv", report::probing_table(&probes, &a.delta_name)));
    }
    if !deps.is_empty() {
        tables.push(("Dependency UAS", "dependency.csv", report::dependency_table(&deps, &a.delta_name)));
    }
    if !entity.is_empty() {
        tables.push(("Entity-value attention", "entity.csv", report::entity_table(&entity)));
    }
    if !transfer.is_empty() {
        tables.push(("Transfer", "transfer.csv", report::transfer_table(&transfer)));
    }
    if let Some(rows) = &baseline {
        tables.push(("Token baseline", "token_baseline.csv", report::token_baseline_table(rows)));
    }
    if !buckets.is_empty() {
        tables.push(("Attention by layer", "attention_curves.csv", report::attention_curves(&buckets)));
    }
    for (title, file, table) in &tables {
        md.push_str(&format!("## {title}\n\n"));
        md.push_str(&table.markdown());
        md.push('\n');
        let path = a.out.join(file);
        write_with(&path, |w| table.write_csv(w))?;
        m.output(&path)?;
    }
    let path = a.out.join("tables.md");
    write_atomic(&path, md.as_bytes())?;
    m.output(&path)?;
    m.write_for(&a.out)?;
    Ok(())
}
