//! Command-line entry point.
//!
//! Every subcommand reads and writes plain files. Flags may also be given in
//! a TOML file passed with `--config`: top-level keys apply to every
//! subcommand that has them, and a `[train]`, `[eval]`, ... table applies to
//! that subcommand only. Command-line flags win over the file. Each run
//! leaves `run-manifest.<subcommand>.json` next to its outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::alignment::{load_embeddings_jsonl, write_embeddings_jsonl, AlignmentConfig, EmbeddingTables};
use crate::cdm::{ModelDims, ModelKind};
use crate::dataset::{
    build_q_matrix, parse_response_logs_as, split_dataset, DatasetSplit, FrequencyTable, LogFormat, DEFAULT_COLD_LT,
    DEFAULT_DROPOUT_RATIOS, DEFAULT_WARM_GT,
};
use crate::error::{Error, Result};
use crate::llmdiag::{
    diagnose_dataset, embed_diagnoses, parse_records_jsonl, write_records_jsonl, DiagnosisCache, Embedder,
    EndpointConfig, HttpTransport,
};
use crate::numerics::Checkpoint;
use crate::pipeline::{
    dropout_sweep, evaluate_cold_warm, export_embeddings, generate_synthetic, history_jsonl, metrics_csv, sweep_csv,
    train, AlignMode, SyntheticSpec, TrainConfig, TrainOutcome,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_ENVIRONMENT: i32 = 2;

const DATASET_FILES: [&str; 4] = ["train.jsonl", "valid.jsonl", "test.jsonl", "index.json"];
const DEFAULT_SPLIT: [f64; 3] = [0.8, 0.1, 0.1];

#[derive(Parser, Debug)]
#[command(
    name = "cogdiag",
    version,
    about = "Cognitive diagnosis with semantic-embedding alignment"
)]
struct Cli {
    /// TOML file with flag values; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Parse a response-log file and split it into a dataset directory.
    Ingest(IngestArgs),
    /// Generate two-stage diagnoses for every student and exercise.
    Diagnose(DiagnoseArgs),
    /// Embed diagnosis texts into semantic tables.
    Embed(EmbedArgs),
    /// Train a diagnosis model, optionally with alignment.
    Train(TrainArgs),
    /// Score a checkpoint on the test split and its cold/warm subsets.
    Eval(EvalArgs),
    /// Retrain with training logs dropped at several ratios.
    SweepDropout(SweepArgs),
    /// Write a synthetic dataset with embeddings and ground truth.
    Synth(SynthArgs),
    /// Export behavioral and projected semantic embeddings.
    ExportEmb(ExportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Ingest(_) => "ingest",
            Command::Diagnose(_) => "diagnose",
            Command::Embed(_) => "embed",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::SweepDropout(_) => "sweep-dropout",
            Command::Synth(_) => "synth",
            Command::ExportEmb(_) => "export-emb",
        }
    }
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
struct IngestArgs {
    /// Response logs, CSV or JSON lines.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Dataset directory to create.
    #[arg(long)]
    out: Option<PathBuf>,
    /// auto, csv or jsonl.
    #[arg(long)]
    format: Option<String>,
    /// Train, valid and test shares.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
}

impl IngestArgs {
    fn defaults() -> Self {
        Self {
            format: Some("auto".into()),
            ratios: Some(DEFAULT_SPLIT.to_vec()),
            seed: Some(0),
            ..Self::default()
        }
    }
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
struct EndpointArgs {
    /// Use the deterministic stub even if an endpoint is configured.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    offline: Option<bool>,
    #[arg(long)]
    base_url: Option<String>,
    #[arg(long)]
    chat_model: Option<String>,
    #[arg(long)]
    embed_model: Option<String>,
    #[arg(long)]
    max_retries: Option<u32>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    /// In-flight remote requests.
    #[arg(long)]
    concurrency: Option<usize>,
    /// Prompt inputs longer than this drop their oldest entries.
    #[arg(long)]
    char_limit: Option<usize>,
}

impl EndpointArgs {
    fn defaults() -> Self {
        let env = EndpointConfig::from_env();
        Self {
            offline: Some(env.offline),
            base_url: env.base_url,
            chat_model: Some(env.chat_model),
            embed_model: Some(env.embed_model),
            max_retries: Some(env.max_retries),
            timeout_secs: Some(env.timeout_secs),
            concurrency: Some(env.concurrency),
            char_limit: env.char_limit,
        }
    }

    fn build(&self) -> EndpointConfig {
        let mut cfg = EndpointConfig::from_env();
        cfg.base_url = self.base_url.clone();
        if let Some(v) = self.offline {
            cfg.offline = v;
        }
        if let Some(v) = &self.chat_model {
            cfg.chat_model = v.clone();
        }
        if let Some(v) = &self.embed_model {
            cfg.embed_model = v.clone();
        }
        if let Some(v) = self.max_retries {
            cfg.max_retries = v;
        }
        if let Some(v) = self.timeout_secs {
            cfg.timeout_secs = v;
        }
        if let Some(v) = self.concurrency {
            cfg.concurrency = v.max(1);
        }
        cfg.char_limit = self.char_limit;
        cfg
    }
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
struct DiagnoseArgs {
    /// Dataset directory.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Defaults to `<data>/diagnoses.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append-only response cache.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    endpoint: EndpointArgs,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
struct EmbedArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Defaults to `<data>/diagnoses.jsonl`.
    #[arg(long)]
    diagnoses: Option<PathBuf>,
    /// Defaults to `<data>/embeddings.jsonl`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    endpoint: EndpointArgs,
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
struct ModelArgs {
    /// irt, mirt, dina or ncd.
    #[arg(long)]
    model: Option<String>,
    /// none, beh or sem.
    #[arg(long)]
    align: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    mirt_dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    ncd_hidden: Option<Vec<usize>>,
    /// Weight of the global contrastive term.
    #[arg(long)]
    alpha: Option<f64>,
    /// Weight of the neighbor contrastive term.
    #[arg(long)]
    beta: Option<f64>,
    /// Weight of the masked reconstruction term.
    #[arg(long)]
    lambda: Option<f64>,
    /// Contrastive temperature.
    #[arg(long)]
    tau: Option<f64>,
    /// Behavioral neighbors per entity.
    #[arg(long)]
    topk: Option<usize>,
    #[arg(long)]
    r_min: Option<f64>,
    #[arg(long)]
    r_max: Option<f64>,
    #[arg(long)]
    negative_cap: Option<usize>,
    #[arg(long)]
    projection_hidden: Option<usize>,
}

impl ModelArgs {
    fn defaults() -> Self {
        let t = TrainConfig::new(ModelKind::Ncd, AlignMode::None, 0);
        let a = AlignmentConfig::default();
        Self {
            model: Some(t.model.kind.name().into()),
            align: Some(t.align.name().into()),
            epochs: Some(t.epochs),
            batch_size: Some(t.batch_size),
            lr: Some(t.lr),
            patience: Some(t.patience),
            mirt_dim: Some(t.model.mirt_dim),
            ncd_hidden: Some(t.model.ncd_hidden.to_vec()),
            alpha: Some(a.alpha),
            beta: Some(a.beta),
            lambda: Some(a.lambda),
            tau: Some(a.tau),
            topk: Some(a.k),
            r_min: Some(a.r_min),
            r_max: Some(a.r_max),
            negative_cap: Some(a.negative_cap),
            projection_hidden: Some(a.projection_hidden),
        }
    }

    fn build(&self, seed: u64) -> Result<(TrainConfig, AlignmentConfig)> {
        let kind: ModelKind = need(self.model.as_deref(), "model")?.parse()?;
        let align: AlignMode = need(self.align.as_deref(), "align")?.parse()?;
        let mut t = TrainConfig::new(kind, align, seed);
        t.epochs = need(self.epochs, "epochs")?;
        t.batch_size = need(self.batch_size, "batch_size")?;
        t.lr = need(self.lr, "lr")?;
        t.patience = need(self.patience, "patience")?;
        t.model.mirt_dim = need(self.mirt_dim, "mirt_dim")?;
        let hidden = need(self.ncd_hidden.as_ref(), "ncd_hidden")?;
        t.model.ncd_hidden = <[usize; 2]>::try_from(hidden.as_slice())
            .map_err(|_| Error::Config(format!("ncd_hidden needs two widths, got {hidden:?}")))?;
        t.validate()?;
        let a = AlignmentConfig {
            alpha: need(self.alpha, "alpha")?,
            beta: need(self.beta, "beta")?,
            lambda: need(self.lambda, "lambda")?,
            tau: need(self.tau, "tau")?,
            k: need(self.topk, "topk")?,
            r_min: need(self.r_min, "r_min")?,
            r_max: need(self.r_max, "r_max")?,
            negative_cap: need(self.negative_cap, "negative_cap")?,
            projection_hidden: need(self.projection_hidden, "projection_hidden")?,
        };
        a.validate()?;
        Ok((t, a))
    }
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Semantic tables; required with --align beh|sem.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output directory for checkpoint.json and history.jsonl.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
}

impl TrainArgs {
    fn defaults() -> Self {
        Self {
            out: Some(PathBuf::from("run")),
            seed: Some(0),
            model: ModelArgs::defaults(),
            ..Self::default()
        }
    }
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exercises with fewer training logs are cold.
    #[arg(long)]
    cold_lt: Option<usize>,
    /// Exercises with more training logs are warm.
    #[arg(long)]
    warm_gt: Option<usize>,
}

impl EvalArgs {
    fn defaults() -> Self {
        Self {
            cold_lt: Some(DEFAULT_COLD_LT),
            warm_gt: Some(DEFAULT_WARM_GT),
            ..Self::default()
        }
    }
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
struct SweepArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Output directory for sweep.csv.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Shares of training logs to drop.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    /// One training run per seed and ratio.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[command(flatten)]
    #[serde(flatten)]
    model: ModelArgs,
}

impl SweepArgs {
    fn defaults() -> Self {
        Self {
            out: Some(PathBuf::from("sweep")),
            ratios: Some(DEFAULT_DROPOUT_RATIOS.to_vec()),
            seeds: Some((0..5).collect()),
            model: ModelArgs::defaults(),
            ..Self::default()
        }
    }
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
struct SynthArgs {
    /// Dataset directory to create.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    students: Option<usize>,
    #[arg(long)]
    exercises: Option<usize>,
    #[arg(long)]
    concepts: Option<usize>,
    #[arg(long)]
    logs_per_student: Option<usize>,
    /// Embedding noise level.
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    semantic_dim: Option<usize>,
    /// Share of rarely attempted exercises.
    #[arg(long)]
    tail_fraction: Option<f64>,
    /// Expected logs per rarely attempted exercise.
    #[arg(long)]
    tail_logs: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SynthArgs {
    fn defaults() -> Self {
        let s = SyntheticSpec::standard(0);
        Self {
            out: None,
            students: Some(s.students),
            exercises: Some(s.exercises),
            concepts: Some(s.concepts),
            logs_per_student: Some(s.logs_per_student),
            noise: Some(s.noise),
            semantic_dim: Some(s.semantic_dim),
            tail_fraction: Some(s.tail_fraction),
            tail_logs: Some(s.tail_logs),
            ratios: Some(DEFAULT_SPLIT.to_vec()),
            seed: Some(s.seed),
        }
    }

    fn spec(&self) -> Result<SyntheticSpec> {
        Ok(SyntheticSpec {
            students: need(self.students, "students")?,
            exercises: need(self.exercises, "exercises")?,
            concepts: need(self.concepts, "concepts")?,
            logs_per_student: need(self.logs_per_student, "logs_per_student")?,
            noise: need(self.noise, "noise")?,
            semantic_dim: need(self.semantic_dim, "semantic_dim")?,
            tail_fraction: need(self.tail_fraction, "tail_fraction")?,
            tail_logs: need(self.tail_logs, "tail_logs")?,
            seed: need(self.seed, "seed")?,
        })
    }
}

#[derive(Args, Debug, Default, Serialize, Deserialize)]
struct ExportArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Semantic tables to project, for behavioral-space checkpoints.
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// Defaults to `embeddings-export.jsonl` beside the checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Provenance record written after every successful run.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub version: String,
    pub config: Value,
    pub seed: Option<u64>,
    /// sha256 of every input file, keyed by path.
    pub inputs: BTreeMap<String, String>,
    pub outputs: Vec<String>,
    pub duration_secs: f64,
}

/// What a subcommand read and wrote.
struct Report {
    dir: PathBuf,
    seed: Option<u64>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

/// Names the file in I/O errors.
fn at<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Io(io) => Error::Io(std::io::Error::new(io.kind(), format!("{}: {io}", path.display()))),
        other => other,
    })
}

fn read_text(path: &Path) -> Result<String> {
    at(path, std::fs::read_to_string(path).map_err(Error::from))
}

fn load_split(dir: &Path) -> Result<DatasetSplit> {
    at(dir, DatasetSplit::load(dir))
}

fn need<T>(v: Option<T>, name: &str) -> Result<T> {
    v.ok_or_else(|| Error::Config(format!("--{} is required", name.replace('_', "-"))))
}

fn ratios3(v: &[f64]) -> Result<[f64; 3]> {
    <[f64; 3]>::try_from(v).map_err(|_| Error::Config(format!("expected three split ratios, got {v:?}")))
}

fn sha256_file(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(at(
        path,
        std::fs::read(path).map_err(Error::from),
    )?)))
}

/// Writes through a sibling temporary file so readers never see a partial
/// file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.{}.tmp", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn dataset_inputs(dir: &Path) -> Vec<PathBuf> {
    DATASET_FILES.iter().map(|f| dir.join(f)).collect()
}

fn load_tables(path: Option<&Path>, split: &DatasetSplit) -> Result<Option<EmbeddingTables>> {
    path.map(|p| load_embeddings_jsonl(&read_text(p)?, &split.indices))
        .transpose()
}

/// Flag values from a config file: top-level keys plus one table per
/// subcommand.
#[derive(Default)]
struct FileConfig {
    global: Map<String, Value>,
    sections: BTreeMap<String, Map<String, Value>>,
}

fn normalize_key(k: &str) -> String {
    k.replace('-', "_")
}

fn keys_of<A: Serialize>(defaults: &A) -> BTreeSet<String> {
    match serde_json::to_value(defaults) {
        Ok(Value::Object(m)) => m.into_iter().map(|(k, _)| k).collect(),
        _ => BTreeSet::new(),
    }
}

fn known_keys() -> BTreeMap<&'static str, BTreeSet<String>> {
    BTreeMap::from([
        ("ingest", keys_of(&IngestArgs::defaults())),
        (
            "diagnose",
            keys_of(&DiagnoseArgs {
                endpoint: EndpointArgs::defaults(),
                ..DiagnoseArgs::default()
            }),
        ),
        (
            "embed",
            keys_of(&EmbedArgs {
                endpoint: EndpointArgs::defaults(),
                ..EmbedArgs::default()
            }),
        ),
        ("train", keys_of(&TrainArgs::defaults())),
        ("eval", keys_of(&EvalArgs::defaults())),
        ("sweep-dropout", keys_of(&SweepArgs::defaults())),
        ("synth", keys_of(&SynthArgs::defaults())),
        ("export-emb", keys_of(&ExportArgs::default())),
    ])
}

impl FileConfig {
    fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {}", path.display(), e.message())))?;
        let known = known_keys();
        let all: BTreeSet<&String> = known.values().flatten().collect();
        let mut cfg = FileConfig::default();
        for (k, v) in table {
            let v = serde_json::to_value(v)?;
            match v {
                Value::Object(m) => {
                    let section = k.replace('_', "-");
                    let keys = known
                        .get(section.as_str())
                        .ok_or_else(|| Error::Config(format!("unknown config section [{k}]")))?;
                    let mut entries = Map::new();
                    for (key, val) in m {
                        let key = normalize_key(&key);
                        if !keys.contains(&key) {
                            return Err(Error::Config(format!("unknown key {key:?} in [{k}]")));
                        }
                        entries.insert(key, val);
                    }
                    cfg.sections.insert(section, entries);
                }
                v => {
                    let key = normalize_key(&k);
                    if !all.contains(&key) {
                        return Err(Error::Config(format!("unknown config key {key:?}")));
                    }
                    cfg.global.insert(key, v);
                }
            }
        }
        Ok(cfg)
    }
}

/// Layers defaults, the config file and command-line flags, returning the
/// resolved arguments and their JSON snapshot.
fn resolve<A: Serialize + DeserializeOwned>(
    name: &str,
    cli: &A,
    defaults: &A,
    file: &FileConfig,
) -> Result<(A, Value)> {
    let Value::Object(mut merged) = serde_json::to_value(defaults)? else {
        return Err(Error::Config(format!("{name}: arguments are not a table")));
    };
    let keys: BTreeSet<String> = merged.keys().cloned().collect();
    for (k, v) in &file.global {
        if keys.contains(k) {
            merged.insert(k.clone(), v.clone());
        }
    }
    if let Some(section) = file.sections.get(name) {
        for (k, v) in section {
            merged.insert(k.clone(), v.clone());
        }
    }
    if let Value::Object(flags) = serde_json::to_value(cli)? {
        for (k, v) in flags {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    let snapshot = Value::Object(merged);
    let resolved = serde_json::from_value(snapshot.clone()).map_err(|e| Error::Config(format!("{name}: {e}")))?;
    Ok((resolved, snapshot))
}

fn ingest(a: IngestArgs) -> Result<Report> {
    let input = need(a.input, "input")?;
    let out = need(a.out, "out")?;
    let text = read_text(&input)?;
    let logs = match need(a.format.as_deref(), "format")? {
        "auto" => parse_response_logs_as(&text, LogFormat::detect(&text))?,
        "csv" => parse_response_logs_as(&text, LogFormat::Delimited)?,
        "jsonl" => parse_response_logs_as(&text, LogFormat::JsonLines)?,
        other => {
            return Err(Error::Config(format!(
                "unknown log format {other:?} (auto, csv, jsonl)"
            )))
        }
    };
    let seed = need(a.seed, "seed")?;
    let split = split_dataset(&logs, ratios3(&need(a.ratios, "ratios")?)?, seed)?;
    split.save(&out)?;
    log::info!(
        "{} logs split into {}/{}/{}",
        logs.len(),
        split.train.len(),
        split.valid.len(),
        split.test.len()
    );
    Ok(Report {
        outputs: dataset_inputs(&out),
        dir: out,
        seed: Some(seed),
        inputs: vec![input],
    })
}

fn diagnose(a: DiagnoseArgs) -> Result<Report> {
    let data = need(a.data, "data")?;
    let out = a.out.unwrap_or_else(|| data.join("diagnoses.jsonl"));
    let split = load_split(&data)?;
    let cfg = a.endpoint.build();
    let cache = match &a.cache {
        Some(p) => DiagnosisCache::open(p)?,
        None => DiagnosisCache::in_memory(),
    };
    if cfg.is_offline() {
        log::info!("no endpoint configured, using the offline stub");
    }
    let transport = HttpTransport::new(Duration::from_secs(cfg.timeout_secs));
    let records = diagnose_dataset(&split, &cfg, &transport, &cache)?;
    write_atomic(&out, write_records_jsonl(&records)?.as_bytes())?;
    let mut outputs = vec![out.clone()];
    outputs.extend(a.cache);
    Ok(Report {
        dir: parent_dir(&out),
        seed: None,
        inputs: dataset_inputs(&data),
        outputs,
    })
}

fn embed(a: EmbedArgs) -> Result<Report> {
    let data = need(a.data, "data")?;
    let diagnoses = a.diagnoses.unwrap_or_else(|| data.join("diagnoses.jsonl"));
    let out = a.out.unwrap_or_else(|| data.join("embeddings.jsonl"));
    let split = load_split(&data)?;
    let records = parse_records_jsonl(&read_text(&diagnoses)?)?;
    let cfg = a.endpoint.build();
    let transport = HttpTransport::new(Duration::from_secs(cfg.timeout_secs));
    let embedder = Embedder::new(cfg);
    let tables = embed_diagnoses(&records, &split.indices, &embedder, &transport)?;
    write_atomic(
        &out,
        write_embeddings_jsonl(&[&tables.students, &tables.exercises])?.as_bytes(),
    )?;
    let mut inputs = dataset_inputs(&data);
    inputs.push(diagnoses);
    Ok(Report {
        dir: parent_dir(&out),
        seed: None,
        inputs,
        outputs: vec![out],
    })
}

fn train_cmd(a: TrainArgs) -> Result<Report> {
    let seed = need(a.seed, "seed")?;
    let (cfg, align) = a.model.build(seed)?;
    let data = need(a.data, "data")?;
    let out = need(a.out, "out")?;
    let split = load_split(&data)?;
    let q = build_q_matrix(&split)?;
    let tables = load_tables(a.embeddings.as_deref(), &split)?;
    let outcome = train(&cfg, &split, &q, tables.as_ref(), &align)?;
    log::info!("best epoch {} of {}", outcome.best_epoch, outcome.history.len());
    let ckpt = out.join("checkpoint.json");
    let history = out.join("history.jsonl");
    write_atomic(&ckpt, outcome.checkpoint()?.to_json()?.as_bytes())?;
    write_atomic(&history, history_jsonl(&outcome.history)?.as_bytes())?;
    let mut inputs = dataset_inputs(&data);
    inputs.extend(a.embeddings);
    Ok(Report {
        dir: out,
        seed: Some(seed),
        inputs,
        outputs: vec![ckpt, history],
    })
}

fn load_outcome(ckpt: &Checkpoint, split: &DatasetSplit) -> Result<TrainOutcome> {
    let outcome = TrainOutcome::from_checkpoint(ckpt)?;
    let dims = ModelDims::of(&split.indices);
    if outcome.model.model.dims != dims {
        return Err(Error::Config(format!(
            "checkpoint was trained on {:?}, dataset has {dims:?}",
            outcome.model.model.dims
        )));
    }
    Ok(outcome)
}

fn eval(a: EvalArgs) -> Result<Report> {
    let checkpoint = need(a.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::from_json(&read_text(&checkpoint)?)?;
    let data = need(a.data, "data")?;
    let split = load_split(&data)?;
    let outcome = load_outcome(&ckpt, &split)?;
    let q = build_q_matrix(&split)?;
    let freq = FrequencyTable::from_train(&split.train, &split.indices)?;
    let rows = evaluate_cold_warm(
        &outcome.model,
        &split,
        &q,
        &freq,
        need(a.cold_lt, "cold_lt")?,
        need(a.warm_gt, "warm_gt")?,
    )?;
    let out = a.out.unwrap_or_else(|| parent_dir(&checkpoint));
    let csv = metrics_csv(&rows);
    print!("{csv}");
    let csv_path = out.join("metrics.csv");
    let json_path = out.join("metrics.json");
    write_atomic(&csv_path, csv.as_bytes())?;
    write_atomic(&json_path, serde_json::to_string_pretty(&rows)?.as_bytes())?;
    let mut inputs = vec![checkpoint];
    inputs.extend(dataset_inputs(&data));
    Ok(Report {
        dir: out,
        seed: Some(outcome.config.seed),
        inputs,
        outputs: vec![csv_path, json_path],
    })
}

fn sweep(a: SweepArgs) -> Result<Report> {
    let (cfg, align) = a.model.build(0)?;
    let data = need(a.data, "data")?;
    let out = need(a.out, "out")?;
    let ratios = need(a.ratios, "ratios")?;
    let seeds = need(a.seeds, "seeds")?;
    let split = load_split(&data)?;
    let q = build_q_matrix(&split)?;
    let tables = load_tables(a.embeddings.as_deref(), &split)?;
    let rows = dropout_sweep(&cfg, &split, &q, tables.as_ref(), &align, &ratios, &seeds)?;
    let path = out.join("sweep.csv");
    write_atomic(&path, sweep_csv(&rows).as_bytes())?;
    let mut inputs = dataset_inputs(&data);
    inputs.extend(a.embeddings);
    Ok(Report {
        dir: out,
        seed: None,
        inputs,
        outputs: vec![path],
    })
}

fn synth(a: SynthArgs) -> Result<Report> {
    let spec = a.spec()?;
    let out = need(a.out.clone(), "out")?;
    let ratios = ratios3(&need(a.ratios.clone(), "ratios")?)?;
    let data = generate_synthetic(&spec)?;
    let split = split_dataset(&data.logs, ratios, spec.seed)?;
    split.save(&out)?;
    let emb = out.join("embeddings.jsonl");
    let truth = out.join("truth.json");
    write_atomic(
        &emb,
        write_embeddings_jsonl(&[&data.embeddings.students, &data.embeddings.exercises])?.as_bytes(),
    )?;
    write_atomic(&truth, serde_json::to_string(&data.truth)?.as_bytes())?;
    let mut outputs = dataset_inputs(&out);
    outputs.extend([emb, truth]);
    Ok(Report {
        dir: out,
        seed: Some(spec.seed),
        inputs: Vec::new(),
        outputs,
    })
}

fn export(a: ExportArgs) -> Result<Report> {
    let checkpoint = need(a.checkpoint, "checkpoint")?;
    let ckpt = Checkpoint::from_json(&read_text(&checkpoint)?)?;
    let data = need(a.data, "data")?;
    let split = load_split(&data)?;
    let outcome = load_outcome(&ckpt, &split)?;
    let tables = load_tables(a.embeddings.as_deref(), &split)?;
    let rows = export_embeddings(&outcome, &split, tables.as_ref())?;
    let mut text = String::new();
    for r in &rows {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    let out = a
        .out
        .unwrap_or_else(|| parent_dir(&checkpoint).join("embeddings-export.jsonl"));
    write_atomic(&out, text.as_bytes())?;
    let mut inputs = vec![checkpoint];
    inputs.extend(dataset_inputs(&data));
    inputs.extend(a.embeddings);
    Ok(Report {
        dir: parent_dir(&out),
        seed: Some(outcome.config.seed),
        inputs,
        outputs: vec![out],
    })
}

fn dispatch(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let file = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let name = cli.command.name();
    let (report, config) = match cli.command {
        Command::Ingest(a) => {
            let (a, c) = resolve(name, &a, &IngestArgs::defaults(), &file)?;
            (ingest(a)?, c)
        }
        Command::Diagnose(a) => {
            let d = DiagnoseArgs {
                endpoint: EndpointArgs::defaults(),
                ..DiagnoseArgs::default()
            };
            let (a, c) = resolve(name, &a, &d, &file)?;
            (diagnose(a)?, c)
        }
        Command::Embed(a) => {
            let d = EmbedArgs {
                endpoint: EndpointArgs::defaults(),
                ..EmbedArgs::default()
            };
            let (a, c) = resolve(name, &a, &d, &file)?;
            (embed(a)?, c)
        }
        Command::Train(a) => {
            let (a, c) = resolve(name, &a, &TrainArgs::defaults(), &file)?;
            (train_cmd(a)?, c)
        }
        Command::Eval(a) => {
            let (a, c) = resolve(name, &a, &EvalArgs::defaults(), &file)?;
            (eval(a)?, c)
        }
        Command::SweepDropout(a) => {
            let (a, c) = resolve(name, &a, &SweepArgs::defaults(), &file)?;
            (sweep(a)?, c)
        }
        Command::Synth(a) => {
            let (a, c) = resolve(name, &a, &SynthArgs::defaults(), &file)?;
            (synth(a)?, c)
        }
        Command::ExportEmb(a) => {
            let (a, c) = resolve(name, &a, &ExportArgs::default(), &file)?;
            (export(a)?, c)
        }
    };
    let mut inputs = BTreeMap::new();
    for p in report.inputs.iter().chain(&cli.config) {
        inputs.insert(p.display().to_string(), sha256_file(p)?);
    }
    let manifest = RunManifest {
        subcommand: name.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config,
        seed: report.seed,
        inputs,
        outputs: report.outputs.iter().map(|p| p.display().to_string()).collect(),
        duration_secs: started.elapsed().as_secs_f64(),
    };
    let path = report.dir.join(format!("run-manifest.{name}.json"));
    write_atomic(&path, serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    Ok(())
}

/// Exit status for an error: 2 for file and network failures, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_environmental() {
        EXIT_ENVIRONMENT
    } else {
        EXIT_INVALID
    }
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match dispatch(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let file = FileConfig {
            global: Map::from_iter([("alpha".into(), Value::from(0.5)), ("cold_lt".into(), Value::from(4))]),
            sections: BTreeMap::from([("train".into(), Map::from_iter([("beta".into(), Value::from(0.25))]))]),
        };
        let mut cli = TrainArgs::default();
        cli.model.beta = Some(0.125);
        let (a, snap) = resolve("train", &cli, &TrainArgs::defaults(), &file).unwrap();
        assert_eq!(a.model.alpha, Some(0.5));
        assert_eq!(a.model.beta, Some(0.125));
        assert_eq!(snap["lambda"], Value::from(0.2));
        assert_eq!(snap["topk"], Value::from(20));
        assert!(snap.get("cold_lt").is_none());
    }
}
