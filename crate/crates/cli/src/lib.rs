//! Command-line front end for the reranking harness.
//!
//! Every subcommand writes its outputs and a `manifest.json` into a run
//! directory. Exit codes: 0 success, 2 usage or input error, 3 run-quality
//! abort, 4 backend exhaustion.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::Value;

mod commands;

pub use commands::{cmd_distill_prep, cmd_evaluate, cmd_oracle, cmd_rank, cmd_synth_bench};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_QUALITY: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;

pub const DEFAULT_GRID: &str = "vanilla:0,1,3,5,10 rerank:1,3,5,10 adarank";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl fmt::Display) -> Self {
        Self { code: EXIT_USAGE, message: message.to_string() }
    }

    pub fn quality(message: impl fmt::Display) -> Self {
        Self { code: EXIT_QUALITY, message: message.to_string() }
    }

    pub fn backend(message: impl fmt::Display) -> Self {
        Self { code: EXIT_BACKEND, message: message.to_string() }
    }

    pub fn io(path: &Path, e: impl fmt::Display) -> Self {
        Self::usage(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

#[derive(Debug, Parser)]
#[command(name = "adarank", version, about = "Adaptive listwise reranking harness for retrieval-augmented QA")]
pub struct Cli {
    /// TOML or JSON file whose keys fill in flags not given on the command line.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Rank every query's candidates and write the parsed selections.
    Rank(RankArgs),
    /// Run a strategy grid and report scores.
    Evaluate(EvaluateArgs),
    /// Best-k oracle over reranked contexts of size 0..=K.
    Oracle(OracleArgs),
    /// Build distillation training data.
    DistillPrep(DistillArgs),
    /// Synthetic weak-vs-strong generator experiment.
    SynthBench(SynthArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Deterministic label-driven mocks.
    Mock,
    /// Remote chat-completions and embeddings endpoints.
    Http,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct BackendArgs {
    #[arg(long, value_enum, default_value = "mock")]
    pub backend: BackendKind,
    /// Relevance labels JSONL driving the mock ranker, teacher and generator.
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Mock ranker: probability of a corrupted output.
    #[arg(long, default_value_t = 0.0)]
    pub noise_rate: f64,
    /// Mock generator: probability of ignoring each irrelevant passage.
    #[arg(long, default_value_t = 0.85)]
    pub robustness: f64,
    /// Mock generator: probability of a correct closed-book answer.
    #[arg(long, default_value_t = 0.2)]
    pub knowledge_rate: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Endpoint/model/retry settings for the http backend (TOML or JSON).
    #[arg(long)]
    pub backend_config: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DatasetArgs {
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// native (one instance per line) or alce (ALCE-style JSON).
    #[arg(long, default_value = "native")]
    pub format: String,
    #[arg(long, default_value_t = adarank_core::types::DEFAULT_MAX_PASSAGES)]
    pub max_passages: usize,
    /// Prompt template file (TOML or JSON); defaults to the built-in template.
    #[arg(long)]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OutputArgs {
    /// Parent directory for run directories.
    #[arg(long, default_value = "runs")]
    #[serde(skip)]
    pub out: PathBuf,
    /// Write into exactly this directory instead of a fresh timestamped one.
    #[arg(long)]
    #[serde(skip)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RankArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// error, fallback_original_order or empty.
    #[arg(long, default_value = "fallback_original_order")]
    pub policy: String,
    /// Print the built-in prompt template as TOML and exit.
    #[arg(long)]
    pub dump_template: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    Lexical,
    Llm,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Strategy grid, e.g. "vanilla:0,1,3 rerank:1,3 adarank".
    #[arg(long, default_value = DEFAULT_GRID)]
    pub grid: String,
    /// Cap the recall denominator for list answers.
    #[arg(long)]
    pub recall_cap: Option<usize>,
    /// Entailment judge for claim recall.
    #[arg(long, value_enum, default_value = "lexical")]
    pub judge: JudgeKind,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleModeArg {
    PerQuery,
    PerDataset,
    Both,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct OracleArgs {
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Largest context size considered.
    #[arg(long = "max-k", short = 'K', default_value_t = 10)]
    pub max_k: usize,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: OracleModeArg,
    #[arg(long)]
    pub recall_cap: Option<usize>,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct DistillArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    #[command(flatten)]
    pub data: DatasetArgs,
    /// Query embeddings JSONL (`{"id", "vector"}`); computed by the backend if absent.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, default_value_t = 5000)]
    pub samples: usize,
    #[arg(long, default_value_t = 100)]
    pub max_iters: usize,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    /// kmeans_pp or random.
    #[arg(long, default_value = "kmeans_pp")]
    pub init: String,
    /// squared_euclidean or cosine.
    #[arg(long, default_value = "squared_euclidean")]
    pub metric: String,
    /// proportional or uniform_per_cluster.
    #[arg(long, default_value = "proportional")]
    pub allocation: String,
    /// nearest_centroid or random.
    #[arg(long, default_value = "nearest_centroid")]
    pub within_cluster: String,
    /// Comma-separated: shuffle, irrelevant.
    #[arg(long, default_value = "")]
    pub augment: String,
    /// Parallel k-means assignment step.
    #[arg(long)]
    pub parallel: bool,
    #[command(flatten)]
    pub backend: BackendArgs,
    #[command(flatten)]
    #[serde(skip)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapArg {
    Low,
    High,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderArg {
    Random,
    Bm25,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 2000, value_parser = clap::value_parser!(u64).range(1..))]
    pub queries: u64,
    #[arg(long, default_value_t = 10)]
    pub m: usize,
    /// Relevant passages per query.
    #[arg(long, default_value_t = 2)]
    pub relevant: usize,
    /// Probability that a query has no relevant passage.
    #[arg(long, default_value_t = 0.0)]
    pub p0: f64,
    #[arg(long, value_enum, default_value = "low")]
    pub overlap: OverlapArg,
    #[arg(long, value_enum, default_value = "random")]
    pub order: OrderArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Robustness of the weak generator.
    #[arg(long, default_value_t = 0.85)]
    pub weak: f64,
    /// Robustness of the strong generator.
    #[arg(long, default_value_t = 0.999)]
    pub strong: f64,
    #[arg(long, default_value_t = 0.0)]
    pub knowledge_rate: f64,
    #[arg(long, default_value = DEFAULT_GRID)]
    pub grid: String,
    #[command(flatten)]
    #[serde(skip)]
    pub output: OutputArgs,
}

fn config_path(argv: &[OsString]) -> Option<PathBuf> {
    let mut it = argv.iter();
    while let Some(a) = it.next() {
        let s = a.to_string_lossy();
        if s == "--config" {
            return it.next().map(PathBuf::from);
        }
        if let Some(rest) = s.strip_prefix("--config=") {
            return Some(PathBuf::from(rest));
        }
    }
    None
}

/// Appends `--key value` for every config-file key whose flag is absent from
/// `argv`, so explicit flags always win.
pub fn merge_config(argv: Vec<OsString>) -> Result<Vec<OsString>, CliError> {
    let Some(path) = config_path(&argv) else {
        return Ok(argv);
    };
    let value = adarank_core::manifest::read_config_value(&path).map_err(CliError::usage)?;
    let Value::Object(map) = value else {
        return Err(CliError::usage(format!("{}: config must be a table of flag values", path.display())));
    };
    let present = |flag: &str| {
        argv.iter().any(|a| {
            let s = a.to_string_lossy();
            s == flag || s.starts_with(&format!("{flag}="))
        })
    };
    let mut out = argv.clone();
    for (key, v) in map {
        let flag = format!("--{}", key.replace('_', "-"));
        if present(&flag) {
            continue;
        }
        let text = match v {
            Value::Bool(true) => {
                out.push(flag.into());
                continue;
            }
            Value::Bool(false) | Value::Null => continue,
            Value::String(s) => s,
            Value::Array(items) => items
                .iter()
                .map(|i| i.as_str().map(str::to_string).unwrap_or_else(|| i.to_string()))
                .collect::<Vec<_>>()
                .join(","),
            other => other.to_string(),
        };
        out.push(flag.into());
        out.push(text.into());
    }
    Ok(out)
}

/// Parses arguments, dispatches, and returns the process exit code.
pub fn run(argv: Vec<OsString>) -> i32 {
    let argv = match merge_config(argv) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            return e.code;
        }
    };
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let result = match &cli.command {
        Command::Rank(a) => cmd_rank(a).map(|_| ()),
        Command::Evaluate(a) => cmd_evaluate(a).map(|_| ()),
        Command::Oracle(a) => cmd_oracle(a).map(|_| ()),
        Command::DistillPrep(a) => cmd_distill_prep(a).map(|_| ()),
        Command::SynthBench(a) => cmd_synth_bench(a).map(|_| ()),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

/// Creates the run directory: `--run-dir` verbatim, otherwise
/// `<out>/<subcommand>-<timestamp>-<config hash prefix>`.
pub fn create_run_dir(output: &OutputArgs, subcommand: &str, config: &Value) -> Result<PathBuf, CliError> {
    let dir = match &output.run_dir {
        Some(d) => d.clone(),
        None => {
            let hash = adarank_core::manifest::config_hash(config);
            output
                .out
                .join(format!("{subcommand}-{}-{}", adarank_core::manifest::run_stamp(), &hash[..8]))
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    Ok(dir)
}
