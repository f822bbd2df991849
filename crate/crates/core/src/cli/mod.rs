//! Command-line front end. Every command writes a run manifest next to its output
//! (`<out>.run.json`) holding the resolved arguments, seeds, a config hash and the
//! hashes of its deterministic artifacts; `replay` re-runs a manifest and compares.

mod commands;

pub use commands::{bench_lookups, predict_query, QueryRequest};


use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baseline::BaselineError;
use crate::colstore::ColstoreError;
use crate::icl_model::{ModelError, RunMode};
use crate::metrics::MetricsError;
use crate::pql::PqlError;
use crate::relgraph::SchemaError;
use crate::scm::ScmError;
use crate::taskgen::TaskgenError;

/// Runtime failure.
pub const EXIT_RUNTIME: i32 = 1;
/// Bad input or failed validation.
pub const EXIT_INPUT: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "relicl", version, about = "In-context prediction over relational databases")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, PartialEq, Subcommand, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Build a binary store from a directory of CSV files.
    Ingest(IngestArgs),
    /// Predict with a query or an explicit task table.
    Predict(PredictArgs),
    /// Pre-train a model on synthetic tasks.
    Pretrain(PretrainArgs),
    /// Fine-tune a model on one task of a store.
    Finetune(FinetuneArgs),
    /// Compare the model with the flattened-feature baseline on the conjunction benchmark.
    Evaluate(EvaluateArgs),
    /// Run a robustness sweep.
    Ablate(AblateArgs),
    /// Measure neighbor lookup throughput on a synthetic store.
    BenchStore(BenchStoreArgs),
    /// Re-run a recorded command and compare its artifacts.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct IngestArgs {
    /// Directory of CSV files, one table per file.
    pub csv_dir: PathBuf,
    /// JSON list of schema edits applied after inference.
    #[arg(long)]
    pub schema_edits: Option<PathBuf>,
    /// Output store file.
    #[arg(long)]
    pub store: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub store: PathBuf,
    /// Predictive query.
    #[arg(long, conflicts_with_all = ["context_csv", "pred_csv"])]
    pub query: Option<String>,
    /// Labeled task-table rows.
    #[arg(long, requires = "pred_csv")]
    pub context_csv: Option<PathBuf>,
    /// Task-table rows to predict.
    #[arg(long, requires = "context_csv")]
    pub pred_csv: Option<PathBuf>,
    /// Entity table of a task table.
    #[arg(long)]
    pub entity_table: Option<String>,
    /// Entity key column of a task table; defaults to the entity table's primary key.
    #[arg(long)]
    pub entity_column: Option<String>,
    /// Anchor time column of a task table.
    #[arg(long)]
    pub time_column: Option<String>,
    #[arg(long, default_value = "target")]
    pub target_column: String,
    /// Entity keys to score (query mode); all visible entities when omitted.
    #[arg(long, value_delimiter = ',')]
    pub indices: Option<Vec<String>>,
    /// ISO-8601 date or datetime.
    #[arg(long)]
    pub anchor_time: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "32,32")]
    pub num_neighbors: Vec<usize>,
    #[arg(long, default_value = "fast")]
    pub run_mode: RunMode,
    /// Lagged targets per row; 10 for temporal queries and 0 otherwise by default.
    #[arg(long)]
    pub lag_timesteps: Option<usize>,
    #[arg(long, default_value_t = 1)]
    pub estimators: usize,
    #[arg(long)]
    pub column_shuffle: bool,
    #[arg(long)]
    pub class_shuffle: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model checkpoint directory; a seeded untrained model is used when omitted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Predictions as JSON lines.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSize {
    Toy,
    Fast,
    Normal,
    Best,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct PretrainArgs {
    #[arg(long, value_enum, default_value = "toy")]
    pub model: ModelSize,
    #[arg(long, default_value_t = 2000)]
    pub steps: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub checkpoint_every: u64,
    /// Checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long)]
    pub anchor_time: Option<String>,
    /// Labeled rows generated for training and validation.
    #[arg(long, default_value_t = 1000)]
    pub rows: usize,
    #[arg(long)]
    pub lag_timesteps: Option<usize>,
    #[arg(long, default_value_t = 100)]
    pub steps: u64,
    #[arg(long, value_delimiter = ',', default_value = "6,3")]
    pub num_neighbors: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct EvaluateArgs {
    #[arg(long, default_value_t = 2000)]
    pub entities: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "16,16")]
    pub num_neighbors: Vec<usize>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationFamily {
    LongMemory,
    MultiTable,
    Conjunction,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct AblateArgs {
    /// context_size, depth, fanout, feature_drop, edge_drop or noise_columns.
    #[arg(long)]
    pub sweep: String,
    #[arg(long, value_enum, default_value = "multi-table")]
    pub family: AblationFamily,
    /// Grid values; the sweep's default grid when omitted.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value_t = 128)]
    pub context_size: usize,
    #[arg(long, default_value_t = 128)]
    pub eval_rows: usize,
    #[arg(long, default_value_t = 16)]
    pub fanout: usize,
    #[arg(long, default_value_t = 2)]
    pub depth: usize,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct BenchStoreArgs {
    #[arg(long, default_value_t = 10_000_000)]
    pub edges: usize,
    #[arg(long, default_value_t = 1_000_000)]
    pub parents: usize,
    #[arg(long, default_value_t = 1_000_000)]
    pub lookups: usize,
    /// Neighbors requested per lookup.
    #[arg(long, default_value_t = 32)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON report.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Args, Serialize, Deserialize)]
pub struct ReplayArgs {
    /// A `.run.json` manifest.
    pub manifest: PathBuf,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Input(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Input(_) => EXIT_INPUT,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<SchemaError> for CliError {
    fn from(e: SchemaError) -> Self {
        CliError::Input(e.to_string())
    }
}

impl From<ScmError> for CliError {
    fn from(e: ScmError) -> Self {
        match e {
            ScmError::Config(_) => CliError::Input(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<ColstoreError> for CliError {
    fn from(e: ColstoreError) -> Self {
        match e {
            ColstoreError::Io { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<TaskgenError> for CliError {
    fn from(e: TaskgenError) -> Self {
        match e {
            TaskgenError::Store(s) => s.into(),
            _ => CliError::Input(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::EmptyContext
            | ModelError::UnlabeledContext
            | ModelError::ClassMismatch(_)
            | ModelError::Config(_)
            | ModelError::Checkpoint(_) => CliError::Input(e.to_string()),
            ModelError::Scm(s) => s.into(),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

impl From<BaselineError> for CliError {
    fn from(e: BaselineError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Model(m) => m.into(),
            MetricsError::Scm(s) => s.into(),
            MetricsError::Taskgen(t) => t.into(),
            MetricsError::Config(_) => CliError::Input(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

/// A query error rendered with a caret under the offending span.
pub(crate) fn pql_error(e: &PqlError, query: &str) -> CliError {
    CliError::Input(e.render(query))
}

/// Record of one run, written to `<out>.run.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub command: Command,
    pub seeds: Vec<u64>,
    /// SHA-256 of the command with its output path cleared.
    pub config_hash: String,
    /// SHA-256 of each deterministic artifact, keyed by its path relative to the
    /// output's parent directory.
    pub artifacts: Vec<(String, String)>,
}

pub fn manifest_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_os_string();
    s.push(".run.json");
    PathBuf::from(s)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)?;
    Ok(hex(&Sha256::digest(&bytes)))
}

impl Command {
    pub fn out(&self) -> Option<&Path> {
        match self {
            Command::Ingest(a) => Some(&a.store),
            Command::Predict(a) => Some(&a.out),
            Command::Pretrain(a) => Some(&a.out),
            Command::Finetune(a) => Some(&a.out),
            Command::Evaluate(a) => Some(&a.out),
            Command::Ablate(a) => Some(&a.out),
            Command::BenchStore(a) => Some(&a.out),
            Command::Replay(_) => None,
        }
    }

    fn set_out(&mut self, out: PathBuf) {
        match self {
            Command::Ingest(a) => a.store = out,
            Command::Predict(a) => a.out = out,
            Command::Pretrain(a) => a.out = out,
            Command::Finetune(a) => a.out = out,
            Command::Evaluate(a) => a.out = out,
            Command::Ablate(a) => a.out = out,
            Command::BenchStore(a) => a.out = out,
            Command::Replay(_) => {}
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        match self {
            Command::Predict(a) => vec![a.seed],
            Command::Pretrain(a) => vec![a.seed],
            Command::Finetune(a) => vec![a.seed],
            Command::Evaluate(a) => a.seeds.clone(),
            Command::Ablate(a) => a.seeds.clone(),
            Command::BenchStore(a) => vec![a.seed],
            Command::Ingest(_) | Command::Replay(_) => Vec::new(),
        }
    }

    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.set_out(PathBuf::new());
        hex(&Sha256::digest(serde_json::to_vec(&c).expect("command serializes")))
    }
}

/// Files of a run whose bytes must reproduce. Directory outputs list every file
/// except timing reports.
fn artifact_files(out: &Path) -> Result<Vec<PathBuf>, CliError> {
    if out.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(out)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_file() && p.file_name().is_some_and(|n| n != commands::TIMING_FILE))
            .collect();
        files.sort();
        Ok(files)
    } else if out.is_file() {
        Ok(vec![out.to_path_buf()])
    } else {
        Ok(Vec::new())
    }
}

fn artifact_hashes(cmd: &Command) -> Result<Vec<(String, String)>, CliError> {
    let Some(out) = cmd.out() else {
        return Ok(Vec::new());
    };
    if matches!(cmd, Command::BenchStore(_)) {
        // Throughput numbers are not reproducible.
        return Ok(Vec::new());
    }
    let base = out.parent().unwrap_or(Path::new(""));
    artifact_files(out)?
        .into_iter()
        .map(|p| {
            let rel = p.strip_prefix(base).unwrap_or(&p).to_string_lossy().into_owned();
            Ok((rel, sha256_file(&p)?))
        })
        .collect()
}

fn write_manifest(cmd: &Command) -> Result<RunManifest, CliError> {
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        command: cmd.clone(),
        seeds: cmd.seeds(),
        config_hash: cmd.config_hash(),
        artifacts: artifact_hashes(cmd)?,
    };
    if let Some(out) = cmd.out() {
        std::fs::write(manifest_path(out), serde_json::to_vec_pretty(&manifest)?)?;
    }
    Ok(manifest)
}

/// Runs one command and writes its manifest.
pub fn execute(cmd: &Command) -> Result<(), CliError> {
    match cmd {
        Command::Ingest(a) => commands::ingest(a)?,
        Command::Predict(a) => commands::predict(a)?,
        Command::Pretrain(a) => commands::pretrain(a)?,
        Command::Finetune(a) => commands::finetune(a)?,
        Command::Evaluate(a) => commands::evaluate(a)?,
        Command::Ablate(a) => commands::ablate(a)?,
        Command::BenchStore(a) => commands::bench_store(a)?,
        Command::Replay(a) => return replay(&a.manifest),
    }
    write_manifest(cmd)?;
    Ok(())
}

/// Re-runs a manifest's command into a scratch location and compares the artifact
/// hashes with the recorded ones.
pub fn replay(path: &Path) -> Result<(), CliError> {
    let text = std::fs::read_to_string(path)?;
    let manifest: RunManifest = serde_json::from_str(&text)?;
    let Some(out) = manifest.command.out() else {
        return Err(CliError::Input("manifest records no output".into()));
    };
    let name = out
        .file_name()
        .map(|n| n.to_os_string())
        .unwrap_or_else(|| "out".into());
    let scratch = std::env::temp_dir().join(format!("relicl-replay-{}-{}", std::process::id(), manifest.config_hash));
    std::fs::create_dir_all(&scratch)?;
    let mut cmd = manifest.command.clone();
    cmd.set_out(scratch.join(&name));
    let result = execute(&cmd).and_then(|()| artifact_hashes(&cmd));
    let _ = std::fs::remove_dir_all(&scratch);
    let got = result?;
    if got != manifest.artifacts {
        let diff: Vec<&str> = manifest
            .artifacts
            .iter()
            .filter(|a| !got.contains(a))
            .map(|a| a.0.as_str())
            .collect();
        return Err(CliError::Runtime(format!(
            "replay differs from the manifest: {}",
            diff.join(", ")
        )));
    }
    println!(
        "replay matches {} artifact(s), config hash {}",
        got.len(),
        manifest.config_hash
    );
    Ok(())
}

/// Parses `args` and runs; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
