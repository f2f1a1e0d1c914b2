//! Command-line orchestration. Each subcommand reads its inputs, writes
//! everything under `--out` and records a `run_manifest.json` there.

mod config;

pub use config::{hex, DataConfig, EvalConfig, ExperimentConfig, KgBuildConfig, KgConfig};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::checkpoint::{self, CheckpointError, Dtype};
use crate::ehr::{
    derive_task_samples, generate_synthetic_cohort, load_dataset, save_dataset, sliding_window_augment, split,
    EhrDataset, EhrError, Label, Splits, Task, TaskSample,
};
use crate::fusion::{read_traces, write_traces};
use crate::interpret::{write_artifacts, InterpretError};
use crate::kg::{
    clean_candidates, load_kg, refine_relations, retrieve_candidates, save_kg, CleanConfig, CleanReport,
    ContradictionSplitter, CooccurrenceSuggester, EdgeKind, HashEmbedder, KgError, MedicalKG, NegationSplitter,
    ProviderConfig, RelationSuggester, TextEmbedder, TokenRuleJudge, TripletJudge,
};
use crate::metrics::{bootstrap_task, task_metric, Metric, MetricError, MetricReport};
use crate::model::{ModelConfig, ModelError, ProtoEhr};
use crate::training::{grid_search, train, write_history, TrainError};

pub const PATIENTS_FILE: &str = "patients.jsonl";
pub const CODES_FILE: &str = "codes.jsonl";
pub const MANIFEST_FILE: &str = "run_manifest.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Ehr(#[from] EhrError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Interpret(#[from] InterpretError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io { .. } => "io",
            CliError::Ehr(_) => "data",
            CliError::Kg(_) => "kg",
            CliError::Model(_) => "model",
            CliError::Train(_) => "train",
            CliError::Metric(_) => "metric",
            CliError::Checkpoint(_) => "checkpoint",
            CliError::Interpret(_) => "interpret",
            CliError::Json(_) => "json",
        }
    }
}

/// One-line JSON error record.
pub fn error_line(kind: &str, message: &str) -> String {
    let one_line = message.split_whitespace().collect::<Vec<_>>().join(" ");
    serde_json::json!({ "error": kind, "message": one_line }).to_string()
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn mkdir(path: &Path) -> Result<()> {
    io(path, fs::create_dir_all(path))
}

fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    io(path, fs::write(path, text))
}

fn file_sha256(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(io(path, fs::read(path))?)))
}

#[derive(Debug, Parser)]
#[command(name = "protoehr", version, about = "Hierarchical prototype learning on EHR cohorts")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort with planted signal.
    GenData(GenDataArgs),
    /// Build a medical knowledge graph over the code vocabulary.
    BuildKg(BuildKgArgs),
    /// Train one model and save the best checkpoint.
    Train(TrainArgs),
    /// Train every point of the hyperparameter grid.
    Gridsearch(GridArgs),
    /// Score a checkpoint with bootstrap resampling and dump fusion traces.
    Evaluate(EvalArgs),
    /// Train full and ablated models over several seeds and compare.
    Ablate(AblateArgs),
    /// Produce the prototype interpretability artifacts from traces.
    Interpret(InterpretArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment TOML file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; falls back to `out` in the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args)]
#[command(group = clap::ArgGroup::new("mode").required(true).args(["mock", "provider_config"]))]
pub struct BuildKgArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory; its codes file is used and the mock suggester reads its visits.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Codes file, for provider mode without a dataset.
    #[arg(long, conflicts_with = "data")]
    pub codes: Option<PathBuf>,
    /// Offline deterministic mocks for every pipeline role.
    #[arg(long)]
    pub mock: bool,
    /// Provider TOML; enables the HTTP client.
    #[arg(long)]
    pub provider_config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct Inputs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// KG TSV.
    #[arg(long)]
    pub kg: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<Task>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    /// Overrides the epoch cap.
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    /// Concurrent trials.
    #[arg(long, default_value_t = 1)]
    pub parallel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Fold {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    /// Checkpoint manifest written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Fold::Test)]
    pub split: Fold,
    /// Bootstrap resamples; overrides the config.
    #[arg(long)]
    pub bootstrap: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub inputs: Inputs,
    /// kg, code-proto, visit-proto, patient-proto, hf or edges:DD[,DM...]
    #[arg(long)]
    pub what: Ablation,
    /// Number of seeds, counted up from the base seed.
    #[arg(long, default_value_t = 5)]
    pub seeds: usize,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct InterpretArgs {
    #[command(flatten)]
    pub common: Common,
    /// Fusion traces (JSON lines) written by `evaluate`.
    #[arg(long)]
    pub traces: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub task: Option<Task>,
}

/// Model component removed in an ablation arm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ablation {
    Kg,
    CodeProto,
    VisitProto,
    PatientProto,
    Hf,
    Edges(BTreeSet<EdgeKind>),
}

impl FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let s = s.trim().to_ascii_lowercase();
        if let Some(kinds) = s.strip_prefix("edges:") {
            let set = kinds
                .split(',')
                .map(EdgeKind::from_str)
                .collect::<std::result::Result<BTreeSet<_>, _>>()
                .map_err(|e| e.to_string())?;
            return Ok(Ablation::Edges(set));
        }
        match s.as_str() {
            "kg" => Ok(Ablation::Kg),
            "code-proto" => Ok(Ablation::CodeProto),
            "visit-proto" => Ok(Ablation::VisitProto),
            "patient-proto" => Ok(Ablation::PatientProto),
            "hf" => Ok(Ablation::Hf),
            other => Err(format!("unknown ablation {other:?}")),
        }
    }
}

impl Ablation {
    pub fn key(&self) -> String {
        match self {
            Ablation::Kg => "kg".into(),
            Ablation::CodeProto => "code-proto".into(),
            Ablation::VisitProto => "visit-proto".into(),
            Ablation::PatientProto => "patient-proto".into(),
            Ablation::Hf => "hf".into(),
            Ablation::Edges(k) => format!("edges:{}", join_kinds(k, ",")),
        }
    }

    /// Row name in the ablation table.
    pub fn row(&self) -> String {
        match self {
            Ablation::Kg => "w/o Medical KG".into(),
            Ablation::CodeProto => "w/o Code Proto.".into(),
            Ablation::VisitProto => "w/o Visit Proto.".into(),
            Ablation::PatientProto => "w/o Patient Proto.".into(),
            Ablation::Hf => "w/o HF".into(),
            Ablation::Edges(k) => format!("w/o {} edges", join_kinds(k, "/")),
        }
    }

    /// Model configuration and graph of the ablated arm.
    pub fn apply(&self, model: &ModelConfig, kg: &MedicalKG) -> Result<(ModelConfig, MedicalKG)> {
        let mut m = model.clone();
        let mut g = kg.clone();
        match self {
            Ablation::Kg => g = MedicalKG::empty(kg.codes().clone()),
            Ablation::CodeProto => m.use_code_proto = false,
            Ablation::VisitProto => m.use_visit_proto = false,
            Ablation::PatientProto => m.use_patient_proto = false,
            Ablation::Hf => m.use_fusion = false,
            Ablation::Edges(k) => g = kg.ablate_edges(k)?,
        }
        m.validate()?;
        Ok((m, g))
    }
}

fn join_kinds(k: &BTreeSet<EdgeKind>, sep: &str) -> String {
    k.iter().map(|e| e.to_string()).collect::<Vec<_>>().join(sep)
}

/// Provenance of a run: enough to repeat it.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub version: String,
    pub config_sha256: String,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    fn new(command: &str, cfg: &ExperimentConfig, inputs: &[PathBuf]) -> Result<Self> {
        let seeds = BTreeMap::from([
            ("seed".to_string(), cfg.seed),
            ("split".to_string(), cfg.split.seed),
            ("train".to_string(), cfg.train.seed),
            ("kg_clean".to_string(), cfg.kg.build.clean.seed),
            ("evaluate".to_string(), cfg.evaluate.seed),
            ("interpret".to_string(), cfg.interpret.seed),
        ]);
        let inputs = inputs
            .iter()
            .map(|p| Ok((p.display().to_string(), file_sha256(p)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_sha256: cfg.hash(),
            seeds,
            inputs,
            config: cfg.clone(),
        })
    }

    fn write(&self, out: &Path) -> Result<()> {
        write_json(&out.join(MANIFEST_FILE), self)
    }
}

/// Loads the config, applies the seed override and resolves `--out`.
fn setup(common: &Common) -> Result<(ExperimentConfig, PathBuf)> {
    let mut cfg = ExperimentConfig::load_or_default(common.config.as_deref())?;
    if let Some(s) = common.seed {
        cfg.reseed(s);
    }
    let out = common
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set out in the config".into()))?;
    cfg.out = Some(out.clone());
    mkdir(&out)?;
    Ok((cfg, out))
}

/// Dataset from `--data`, `data.path` or `data.generator`, plus the files
/// it was read from.
pub fn load_data(flag: Option<&Path>, cfg: &ExperimentConfig) -> Result<(EhrDataset, Vec<PathBuf>)> {
    let dir = flag.map(Path::to_path_buf).or_else(|| cfg.data.path.clone());
    if let Some(dir) = dir {
        let (p, c) = (dir.join(PATIENTS_FILE), dir.join(CODES_FILE));
        let ds = load_dataset(&p, &c).map_err(|e| match e {
            EhrError::Io(source) => CliError::Io { path: dir.clone(), source },
            e => e.into(),
        })?;
        return Ok((ds, vec![p, c]));
    }
    match &cfg.data.generator {
        Some(g) => Ok((generate_synthetic_cohort(g, cfg.seed)?.0, Vec::new())),
        None => Err(CliError::Config(
            "no dataset: pass --data or set data.path or data.generator".into(),
        )),
    }
}

/// KG from `--kg` or `kg.path`; an empty graph when neither is set.
pub fn load_graph(flag: Option<&Path>, cfg: &ExperimentConfig, ds: &EhrDataset) -> Result<(MedicalKG, Vec<PathBuf>)> {
    match flag.map(Path::to_path_buf).or_else(|| cfg.kg.path.clone()) {
        Some(p) => {
            let kg = load_kg(&p, &ds.codes).map_err(|e| match e {
                KgError::Io(source) => CliError::Io { path: p.clone(), source },
                e => e.into(),
            })?;
            Ok((kg, vec![p]))
        }
        None => {
            log::warn!("no knowledge graph given; training on an empty fact set");
            Ok((MedicalKG::empty(ds.codes.clone()), Vec::new()))
        }
    }
}

/// Patient-level split of the task samples. Only the training fold is
/// expanded into visit prefixes.
pub fn task_splits(ds: &EhrDataset, task: Task, cfg: &ExperimentConfig) -> Result<Splits> {
    let derived = derive_task_samples(ds, task);
    if derived.skipped > 0 {
        log::info!("{} patients yield no {task} sample", derived.skipped);
    }
    let mut s = split(&derived.samples, &cfg.split)?;
    s.train = sliding_window_augment(ds, std::mem::take(&mut s.train), task);
    if s.train.is_empty() || s.val.is_empty() || s.test.is_empty() {
        return Err(CliError::Config(format!(
            "split left an empty fold (train {}, val {}, test {})",
            s.train.len(),
            s.val.len(),
            s.test.len()
        )));
    }
    Ok(s)
}

/// Every metric on one prediction set; `None` where undefined.
pub fn score_all(task: Task, probs: &[Vec<f64>], samples: &[TaskSample]) -> Result<BTreeMap<String, Option<f64>>> {
    let p: Vec<&Vec<f64>> = probs.iter().collect();
    let l: Vec<&Label> = samples.iter().map(|s| &s.label).collect();
    let mut out = BTreeMap::new();
    for m in Metric::ALL {
        let v = match task_metric(task, m, &p, &l) {
            Ok(v) => Some(v),
            Err(MetricError::Undefined(why)) => {
                log::warn!("{m} undefined: {why}");
                None
            }
            Err(e) => return Err(e.into()),
        };
        out.insert(m.to_string(), v);
    }
    Ok(out)
}

fn resolve_task(flag: Option<Task>, cfg: &mut ExperimentConfig) -> Task {
    if let Some(t) = flag {
        cfg.task = t;
    }
    cfg.task
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::BuildKg(a) => build_kg(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Gridsearch(a) => gridsearch(&a),
        Command::Evaluate(a) => evaluate(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Interpret(a) => interpret(&a),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let (mut cfg, out) = setup(&a.common)?;
    if cfg.data.path.is_some() {
        return Err(CliError::Config("gen-data needs data.generator, not data.path".into()));
    }
    let gen = cfg.data.generator.get_or_insert_with(Default::default).clone();
    let (ds, truth) = generate_synthetic_cohort(&gen, cfg.seed)?;
    let (p, c) = (out.join(PATIENTS_FILE), out.join(CODES_FILE));
    save_dataset(&ds, &p, &c)?;
    write_json(&out.join("truth.json"), &truth)?;
    write_json(&out.join("stats.json"), &ds.stats())?;
    log::info!("wrote {} patients to {}", ds.patients.len(), out.display());
    RunManifest::new("gen-data", &cfg, &[])?.write(&out)
}

/// Counts reported by `build-kg`.
#[derive(Debug, Clone, Serialize)]
pub struct KgReport {
    pub candidates: usize,
    pub labeled: usize,
    pub verified: usize,
    pub classifier_positive: usize,
    pub selected: usize,
    pub relations_before: usize,
    pub relations_after: usize,
    /// Forward facts in the final graph.
    pub triplets: usize,
    /// Facts including the derived inverse edges.
    pub triplets_with_inverse: usize,
    /// Codes touched by at least one fact.
    pub entities: usize,
    pub edge_kinds: BTreeMap<String, usize>,
}

/// Retrieval, cleaning and refinement with the given roles.
pub fn run_kg_pipeline(
    ds_codes: &crate::ehr::CodeTable,
    suggester: &dyn RelationSuggester,
    judge: &dyn TripletJudge,
    embedder: &dyn TextEmbedder,
    splitter: &dyn ContradictionSplitter,
    build: &KgBuildConfig,
) -> Result<(MedicalKG, KgReport)> {
    let cands = retrieve_candidates(ds_codes, suggester)?;
    let n = cands.triplets.len();
    if n == 0 {
        return Err(KgError::Config("the suggester produced no candidates".into()).into());
    }
    let budget = ((n as f64 * build.label_fraction).ceil() as usize).clamp(1, build.clean.label_budget.max(1)).min(n);
    let clean = CleanConfig {
        label_budget: budget,
        ..build.clean.clone()
    };
    let cleaned = clean_candidates(&cands, ds_codes, judge, embedder, &clean)?;
    let kg = refine_relations(ds_codes, &cleaned.scored, &cands.relations, embedder, splitter, build.ward_threshold)?;
    let CleanReport {
        candidates,
        labeled,
        verified,
        classifier_positive,
        selected,
    } = cleaned.report;
    let entities: BTreeSet<_> = kg.facts().iter().flat_map(|t| [t.head, t.tail]).collect();
    let report = KgReport {
        candidates,
        labeled,
        verified,
        classifier_positive,
        selected,
        relations_before: cands.relations.len(),
        relations_after: kg.num_relations(),
        triplets: kg.facts().len(),
        triplets_with_inverse: kg.finalized().len(),
        entities: entities.len(),
        edge_kinds: kg.kind_counts().into_iter().map(|(k, c)| (k.to_string(), c)).collect(),
    };
    Ok((kg, report))
}

fn build_kg(a: &BuildKgArgs) -> Result<()> {
    let (cfg, out) = setup(&a.common)?;
    let build = &cfg.kg.build;
    let embedder = HashEmbedder {
        dim: build.embed_dim,
        seed: cfg.seed,
        ..Default::default()
    };
    let splitter = NegationSplitter::default();
    let (kg, report, inputs) = if a.mock {
        let (ds, inputs) = load_data(a.data.as_deref(), &cfg)?;
        let suggester = CooccurrenceSuggester::from_dataset(&ds, build.min_count, build.strong_ratio);
        let (kg, report) = run_kg_pipeline(&ds.codes, &suggester, &TokenRuleJudge::clinical(), &embedder, &splitter, build)?;
        (kg, report, inputs)
    } else {
        let path = a.provider_config.as_ref().expect("clap enforces a mode");
        let text = io(path, fs::read_to_string(path))?;
        let pcfg: ProviderConfig = toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?;
        let codes_path = match (&a.codes, &a.data) {
            (Some(c), _) => c.clone(),
            (None, Some(d)) => d.join(CODES_FILE),
            (None, None) => return Err(CliError::Config("provider mode needs --codes or --data".into())),
        };
        let codes = crate::ehr::load_codes(&codes_path)?;
        let (kg, report) = provider_pipeline(pcfg.with_env(), &codes, build)?;
        (kg, report, vec![path.clone(), codes_path])
    };
    save_kg(&kg, &out.join("kg.tsv"))?;
    write_json(&out.join("kg_report.json"), &report)?;
    log::info!("kept {} facts over {} relations", report.triplets, report.relations_after);
    RunManifest::new("build-kg", &cfg, &inputs)?.write(&out)
}

#[cfg(feature = "provider")]
fn provider_pipeline(pcfg: ProviderConfig, codes: &crate::ehr::CodeTable, build: &KgBuildConfig) -> Result<(MedicalKG, KgReport)> {
    let client = crate::kg::ProviderClient::new(pcfg)?;
    run_kg_pipeline(codes, &client, &client, &client, &client, build)
}

#[cfg(not(feature = "provider"))]
fn provider_pipeline(_: ProviderConfig, _: &crate::ehr::CodeTable, _: &KgBuildConfig) -> Result<(MedicalKG, KgReport)> {
    Err(CliError::Config("this build has no provider client; rebuild with --features provider".into()))
}

/// Outcome of one training run on fixed splits.
#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub task: Task,
    pub best_epoch: usize,
    pub early_stop_metric: String,
    pub best_val: f64,
    pub test: BTreeMap<String, Option<f64>>,
    pub parameters: usize,
}

/// Trains from `model_cfg` and scores the best parameters on the test fold.
pub fn fit_and_score(
    model_cfg: &ModelConfig,
    cfg: &ExperimentConfig,
    task: Task,
    kg: &MedicalKG,
    splits: &Splits,
    init_seed: u64,
) -> Result<(crate::training::TrainOutcome, RunSummary)> {
    let model = ProtoEhr::new(model_cfg.clone(), task, kg, init_seed)?;
    let parameters = model.num_parameters();
    let outcome = train(model, &cfg.train, &splits.train, &splits.val)?;
    let best = ProtoEhr::from_params(model_cfg.clone(), task, kg, outcome.best_params.clone())?;
    let (probs, _) = best.predict(&splits.test, cfg.train.eval_batch_size)?;
    let summary = RunSummary {
        task,
        best_epoch: outcome.best_epoch,
        early_stop_metric: cfg.train.metric(task).to_string(),
        best_val: outcome.best_metric,
        test: score_all(task, &probs, &splits.test)?,
        parameters,
    };
    Ok((outcome, summary))
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let (mut cfg, out) = setup(&a.common)?;
    let task = resolve_task(a.inputs.task, &mut cfg);
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    cfg.validate()?;
    let (ds, mut inputs) = load_data(a.inputs.data.as_deref(), &cfg)?;
    let (kg, kg_inputs) = load_graph(a.inputs.kg.as_deref(), &cfg, &ds)?;
    inputs.extend(kg_inputs);
    let splits = task_splits(&ds, task, &cfg)?;
    log::info!("{task}: {} train, {} val, {} test samples", splits.train.len(), splits.val.len(), splits.test.len());
    let (outcome, summary) = fit_and_score(&cfg.model, &cfg, task, &kg, &splits, cfg.seed)?;
    checkpoint::save(&out.join("model.json"), &outcome.best_params, Dtype::F32, Some(task), Some(&cfg.model))?;
    write_history(&out.join("history.csv"), &outcome.history)?;
    write_json(&out.join("metrics.json"), &summary)?;
    RunManifest::new("train", &cfg, &inputs)?.write(&out)
}

fn gridsearch(a: &GridArgs) -> Result<()> {
    let (mut cfg, out) = setup(&a.common)?;
    let task = resolve_task(a.inputs.task, &mut cfg);
    let (ds, mut inputs) = load_data(a.inputs.data.as_deref(), &cfg)?;
    let (kg, kg_inputs) = load_graph(a.inputs.kg.as_deref(), &cfg, &ds)?;
    inputs.extend(kg_inputs);
    let splits = task_splits(&ds, task, &cfg)?;
    let grid = cfg.grid.clone().unwrap_or_default();
    log::info!("{} grid points on {} workers", grid.len(), a.parallel);
    let trials = grid_search(&grid, &cfg.model, &cfg.train, task, &kg, &splits.train, &splits.val, a.parallel, &out)?;
    write_json(&out.join("trials.json"), &trials)?;
    RunManifest::new("gridsearch", &cfg, &inputs)?.write(&out)
}

fn evaluate(a: &EvalArgs) -> Result<()> {
    let (mut cfg, out) = setup(&a.common)?;
    let (manifest, params) = checkpoint::load(&a.checkpoint)?;
    let task = a
        .inputs
        .task
        .or(manifest.task)
        .ok_or_else(|| CliError::Config("checkpoint records no task; pass --task".into()))?;
    cfg.task = task;
    if let Some(m) = manifest.model.clone() {
        cfg.model = m;
    }
    if let Some(n) = a.bootstrap {
        cfg.evaluate.bootstrap = n;
    }
    let (ds, mut inputs) = load_data(a.inputs.data.as_deref(), &cfg)?;
    let (kg, kg_inputs) = load_graph(a.inputs.kg.as_deref(), &cfg, &ds)?;
    inputs.extend(kg_inputs);
    inputs.push(a.checkpoint.clone());
    let splits = task_splits(&ds, task, &cfg)?;
    let fold = match a.split {
        Fold::Train => &splits.train,
        Fold::Val => &splits.val,
        Fold::Test => &splits.test,
    };
    let model = ProtoEhr::from_params(cfg.model.clone(), task, &kg, params)?;
    let (probs, traces) = model.predict(fold, cfg.train.eval_batch_size)?;
    let labels: Vec<Label> = fold.iter().map(|s| s.label.clone()).collect();
    let mut reports: Vec<MetricReport> = Vec::new();
    for m in Metric::ALL {
        match bootstrap_task(task, m, &probs, &labels, cfg.evaluate.bootstrap, cfg.evaluate.seed) {
            Ok(r) => reports.push(r),
            Err(MetricError::Undefined(why)) => log::warn!("{m} skipped: {why}"),
            Err(e) => return Err(e.into()),
        }
    }
    write_json(&out.join("metrics.json"), &reports)?;
    let path = out.join("traces.jsonl");
    let mut w = BufWriter::new(io(&path, fs::File::create(&path))?);
    io(&path, write_traces(&traces, &mut w).and_then(|_| w.flush()))?;
    RunManifest::new("evaluate", &cfg, &inputs)?.write(&out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ArmStats {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub values: Vec<Option<f64>>,
}

impl ArmStats {
    fn of(values: Vec<Option<f64>>) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        let (mean, std) = if defined.is_empty() {
            (None, None)
        } else {
            let n = defined.len() as f64;
            let m = defined.iter().sum::<f64>() / n;
            (Some(m), Some((defined.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt()))
        };
        Self { mean, std, values }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MetricDelta {
    pub full: ArmStats,
    pub ablated: ArmStats,
    /// Ablated mean minus full mean.
    pub delta: Option<f64>,
    /// `delta` relative to the full mean.
    pub relative_delta: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub what: String,
    pub row: String,
    pub task: Task,
    pub seeds: Vec<u64>,
    pub metrics: BTreeMap<String, MetricDelta>,
}

/// Trains both arms for each seed on one shared split.
pub fn run_ablation(what: &Ablation, cfg: &ExperimentConfig, task: Task, ds: &EhrDataset, kg: &MedicalKG, n_seeds: usize) -> Result<AblationReport> {
    if n_seeds == 0 {
        return Err(CliError::Config("--seeds must be positive".into()));
    }
    let splits = task_splits(ds, task, cfg)?;
    let (ab_model, ab_kg) = what.apply(&cfg.model, kg)?;
    let seeds: Vec<u64> = (0..n_seeds as u64).map(|i| cfg.seed.wrapping_add(i)).collect();
    let mut full = Vec::new();
    let mut ablated = Vec::new();
    for &s in &seeds {
        let mut c = cfg.clone();
        c.train.seed = s;
        let (_, f) = fit_and_score(&cfg.model, &c, task, kg, &splits, s)?;
        let (_, g) = fit_and_score(&ab_model, &c, task, &ab_kg, &splits, s)?;
        log::info!("seed {s}: full {:?}, {} {:?}", f.test, what.key(), g.test);
        full.push(f.test);
        ablated.push(g.test);
    }
    let metrics = Metric::ALL
        .iter()
        .map(|m| {
            let col = |runs: &[BTreeMap<String, Option<f64>>]| ArmStats::of(runs.iter().map(|r| r[m.as_str()]).collect());
            let (f, g) = (col(&full), col(&ablated));
            let delta = f.mean.zip(g.mean).map(|(f, g)| g - f);
            let relative_delta = delta.zip(f.mean).and_then(|(d, f)| (f != 0.0).then(|| d / f));
            (
                m.to_string(),
                MetricDelta {
                    full: f,
                    ablated: g,
                    delta,
                    relative_delta,
                },
            )
        })
        .collect();
    Ok(AblationReport {
        what: what.key(),
        row: what.row(),
        task,
        seeds,
        metrics,
    })
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let (mut cfg, out) = setup(&a.common)?;
    let task = resolve_task(a.inputs.task, &mut cfg);
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    cfg.validate()?;
    let (ds, mut inputs) = load_data(a.inputs.data.as_deref(), &cfg)?;
    let (kg, kg_inputs) = load_graph(a.inputs.kg.as_deref(), &cfg, &ds)?;
    inputs.extend(kg_inputs);
    let report = run_ablation(&a.what, &cfg, task, &ds, &kg, a.seeds)?;
    write_json(&out.join("ablation.json"), &report)?;
    RunManifest::new("ablate", &cfg, &inputs)?.write(&out)
}

fn interpret(a: &InterpretArgs) -> Result<()> {
    let (mut cfg, out) = setup(&a.common)?;
    let task = resolve_task(a.task, &mut cfg);
    let f = io(&a.traces, fs::File::open(&a.traces))?;
    let traces = io(&a.traces, read_traces(BufReader::new(f)))?;
    if traces.is_empty() {
        return Err(CliError::Config(format!("{} holds no traces", a.traces.display())));
    }
    let (ds, mut inputs) = load_data(a.data.as_deref(), &cfg)?;
    inputs.push(a.traces.clone());
    write_artifacts(&traces, &ds, task, &cfg.interpret, &out)?;
    RunManifest::new("interpret", &cfg, &inputs)?.write(&out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ablation_parsing_and_rows() {
        assert_eq!("kg".parse::<Ablation>().unwrap().row(), "w/o Medical KG");
        assert_eq!("HF".parse::<Ablation>().unwrap(), Ablation::Hf);
        let e: Ablation = "edges:DM,dd".parse().unwrap();
        assert_eq!(e, Ablation::Edges([EdgeKind::DD, EdgeKind::DM].into()));
        assert_eq!(e.key(), "edges:DD,DM");
        assert!("edges:XY".parse::<Ablation>().is_err());
        assert!("nope".parse::<Ablation>().is_err());
    }

    #[test]
    fn ablation_apply_touches_one_component() {
        let m = ModelConfig::default();
        let codes = crate::ehr::CodeTable::new(vec![
            crate::ehr::MedicalCode { id: 1, name: "a".into(), kind: crate::ehr::CodeKind::Diagnosis },
            crate::ehr::MedicalCode { id: 2, name: "b".into(), kind: crate::ehr::CodeKind::Medication },
        ])
        .unwrap();
        let kg = MedicalKG::from_named(codes, &[("a", "treated by", "b")]).unwrap();
        let (m2, g2) = Ablation::Kg.apply(&m, &kg).unwrap();
        assert_eq!(m2, m);
        assert!(g2.facts().is_empty());
        let (m3, g3) = Ablation::VisitProto.apply(&m, &kg).unwrap();
        assert!(!m3.use_visit_proto && m3.use_code_proto);
        assert_eq!(g3, kg);
        let (_, g4) = Ablation::Edges([EdgeKind::DM].into()).apply(&m, &kg).unwrap();
        assert!(g4.facts().is_empty());
    }

    #[test]
    fn error_line_is_single_line_json() {
        let l = error_line("io", "bad\nthing  here");
        assert!(!l.contains('\n'));
        let v: serde_json::Value = serde_json::from_str(&l).unwrap();
        assert_eq!(v["message"], "bad thing here");
    }

    #[test]
    fn arm_stats_skip_undefined() {
        let s = ArmStats::of(vec![Some(1.0), None, Some(3.0)]);
        assert_eq!(s.mean, Some(2.0));
        assert_eq!(s.std, Some(1.0));
        assert!(ArmStats::of(vec![None]).mean.is_none());
    }
}
