//! Command-line entry point: subcommands per pipeline stage, a JSON config
//! file with flag overrides, and stable exit codes (0 success, 1 config or
//! io error, 2 backend failure, 3 validation failure).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use steploc::pipeline::{
    config_hash, effective_cache_dir, load_analysis_summary, load_metrics_summary, run_eval,
    stage_report, BackendChoice, EmbeddingProvider, PipelineError, RunConfig, Stage,
};
use steploc::corpus::SchemaKind;
use steploc::prompting::PromptSetting;

#[derive(Parser)]
#[command(
    name = "steploc",
    version,
    about = "Locates the first erroneous step in stepwise math solutions and analyzes what drives localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ingest the corpus and write the canonical JSONL artifact
    Ingest(RunArgs),
    /// Run stages through reference solving
    Solve(RunArgs),
    /// Run stages through corrected-solution generation
    Correct(RunArgs),
    /// Run stages through first-error localization
    Localize(RunArgs),
    /// Run stages through metric computation
    Metrics(RunArgs),
    /// Run stages through feature extraction
    Features(RunArgs),
    /// Run stages through the statistical analyses
    Analyze(RunArgs),
    /// Render report.md from existing metric and analysis artifacts
    Report(RunArgs),
    /// Run the full pipeline
    Run(RunArgs),
}

/// Configuration sources: an optional JSON file, then flag overrides.
#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; every flag below overrides its field
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus JSONL file
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Corpus schema: vtg, prm800k, or canonical
    #[arg(long)]
    schema: Option<String>,
    /// Model identifier sent to the backend and recorded in artifacts
    #[arg(long)]
    model_id: Option<String>,
    /// Backend: mock, live, or cache_only
    #[arg(long)]
    backend: Option<String>,
    /// Response script for the mock backend
    #[arg(long)]
    mock_script: Option<PathBuf>,
    /// Chat-completions endpoint URL for the live backend
    #[arg(long)]
    endpoint: Option<String>,
    /// Environment variable holding the API key
    #[arg(long)]
    api_key_env: Option<String>,
    /// Setting to run (repeatable): wo_s, w_gs, w_cor, random
    #[arg(long = "setting")]
    settings: Vec<String>,
    /// Root seed for every stochastic component
    #[arg(long)]
    root_seed: Option<u64>,
    /// Number of random-baseline runs to average
    #[arg(long)]
    n_random_runs: Option<u64>,
    /// Embedding provider: hash or remote
    #[arg(long)]
    embedding_provider: Option<String>,
    /// Embedding dimension
    #[arg(long)]
    embedding_dimension: Option<usize>,
    /// Embedding seed (hash provider)
    #[arg(long)]
    embedding_seed: Option<u64>,
    /// Output directory for all artifacts
    #[arg(long)]
    out: Option<PathBuf>,
    /// Response cache directory (defaults to <out>/cache)
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Abort ingest on the first invalid line instead of skipping it
    #[arg(long)]
    strict: bool,
    /// Worked examples per prompt
    #[arg(long)]
    few_shot_count: Option<usize>,
    /// Maximum concurrent backend requests
    #[arg(long)]
    parallelism: Option<usize>,
    /// Directory of prompt template overrides
    #[arg(long)]
    templates_dir: Option<PathBuf>,
    /// CSV of per-problem syntactic features (id,q_tree_depth,q_np_count)
    #[arg(long)]
    sidecar: Option<PathBuf>,
    /// CSV of rater annotations (id,metric,rater_a,rater_b)
    #[arg(long)]
    annotations: Option<PathBuf>,
    /// Absolute rank-correlation threshold for feature pruning
    #[arg(long)]
    prune_threshold: Option<f64>,
    /// Trees per random forest
    #[arg(long)]
    n_trees: Option<usize>,
    /// Forest seeds per setting
    #[arg(long)]
    n_forest_seeds: Option<u64>,
    /// Apply the continuity correction to chi-square tests
    #[arg(long)]
    continuity_correction: bool,
    /// Odd number of distance-histogram bins
    #[arg(long)]
    distance_bins: Option<usize>,
}

fn config_error(message: String) -> PipelineError {
    PipelineError::Config(message)
}

fn parse_schema(raw: &str) -> Result<SchemaKind, PipelineError> {
    serde_json::from_value(serde_json::Value::String(raw.to_string()))
        .map_err(|_| config_error(format!("unknown schema '{raw}' (vtg, prm800k, canonical)")))
}

fn parse_backend(raw: &str) -> Result<BackendChoice, PipelineError> {
    serde_json::from_value(serde_json::Value::String(raw.to_string()))
        .map_err(|_| config_error(format!("unknown backend '{raw}' (mock, live, cache_only)")))
}

fn parse_provider(raw: &str) -> Result<EmbeddingProvider, PipelineError> {
    serde_json::from_value(serde_json::Value::String(raw.to_string()))
        .map_err(|_| config_error(format!("unknown embedding provider '{raw}' (hash, remote)")))
}

/// Skeleton with serde defaults filled in; flags must supply the rest.
fn skeleton_config() -> RunConfig {
    serde_json::from_value(serde_json::json!({
        "corpus": {"path": "", "schema": "canonical"},
        "model": {"model_id": "unset", "backend": "cache_only"},
        "out_dir": "out",
        "cache_dir": "",
    }))
    .expect("skeleton config is well formed")
}

fn load_config_file(path: &PathBuf) -> Result<RunConfig, PipelineError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| PipelineError::Io { path: path.display().to_string(), source })?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn assemble_config(args: &RunArgs) -> Result<RunConfig, PipelineError> {
    let mut config = match &args.config {
        Some(path) => load_config_file(path)?,
        None => skeleton_config(),
    };
    if let Some(path) = &args.corpus {
        config.corpus.path = path.clone();
    }
    if let Some(raw) = &args.schema {
        config.corpus.schema = parse_schema(raw)?;
    }
    if let Some(id) = &args.model_id {
        config.model.model_id = id.clone();
    }
    if let Some(raw) = &args.backend {
        config.model.backend = parse_backend(raw)?;
    }
    if let Some(path) = &args.mock_script {
        config.model.mock_script = Some(path.clone());
    }
    if let Some(url) = &args.endpoint {
        config.model.endpoint = Some(url.clone());
    }
    if let Some(var) = &args.api_key_env {
        config.model.api_key_env = Some(var.clone());
    }
    if !args.settings.is_empty() {
        config.settings = args
            .settings
            .iter()
            .map(|raw| {
                PromptSetting::from_key(raw).ok_or_else(|| {
                    config_error(format!("unknown setting '{raw}' (wo_s, w_gs, w_cor, random)"))
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
    }
    if let Some(seed) = args.root_seed {
        config.root_seed = seed;
    }
    if let Some(runs) = args.n_random_runs {
        config.n_random_runs = runs;
    }
    if let Some(raw) = &args.embedding_provider {
        config.embedding.provider = parse_provider(raw)?;
    }
    if let Some(dimension) = args.embedding_dimension {
        config.embedding.dimension = dimension;
    }
    if let Some(seed) = args.embedding_seed {
        config.embedding.seed = seed;
    }
    if let Some(out) = &args.out {
        config.out_dir = out.clone();
    }
    if let Some(dir) = &args.cache_dir {
        config.cache_dir = dir.clone();
    }
    if args.strict {
        config.strict = true;
    }
    if let Some(count) = args.few_shot_count {
        config.few_shot_count = count;
    }
    if let Some(limit) = args.parallelism {
        config.parallelism = limit;
    }
    if let Some(dir) = &args.templates_dir {
        config.templates_dir = Some(dir.clone());
    }
    if let Some(path) = &args.sidecar {
        config.sidecar_path = Some(path.clone());
    }
    if let Some(path) = &args.annotations {
        config.annotations_path = Some(path.clone());
    }
    if let Some(threshold) = args.prune_threshold {
        config.prune_threshold = threshold;
    }
    if let Some(n) = args.n_trees {
        config.n_trees = n;
    }
    if let Some(n) = args.n_forest_seeds {
        config.n_forest_seeds = n;
    }
    if args.continuity_correction {
        config.continuity_correction = true;
    }
    if let Some(bins) = args.distance_bins {
        config.distance_bins = bins;
    }
    config.cache_dir = effective_cache_dir(&config);
    if config.corpus.path.as_os_str().is_empty() {
        return Err(config_error("a corpus is required (--corpus or the config file)".into()));
    }
    config.validate()?;
    Ok(config)
}

fn execute(command: Command) -> Result<(), PipelineError> {
    let (args, stage) = match command {
        Command::Ingest(args) => (args, Some(Stage::Ingest)),
        Command::Solve(args) => (args, Some(Stage::Solve)),
        Command::Correct(args) => (args, Some(Stage::Correct)),
        Command::Localize(args) => (args, Some(Stage::Localize)),
        Command::Metrics(args) => (args, Some(Stage::Metrics)),
        Command::Features(args) => (args, Some(Stage::Features)),
        Command::Analyze(args) => (args, Some(Stage::Analyze)),
        Command::Report(args) => (args, None),
        Command::Run(args) => (args, Some(Stage::Report)),
    };
    let config = assemble_config(&args)?;
    match stage {
        Some(stage) => {
            let manifest = run_eval(&config, stage)?;
            println!(
                "run {} complete: {} stage(s), {} cache hit(s), {} cache miss(es)",
                manifest.config_hash,
                manifest.stages.len(),
                manifest.cache.cache_hits,
                manifest.cache.cache_misses,
            );
            println!("artifacts in {}", config.out_dir.display());
        }
        None => {
            // standalone report: render strictly from persisted artifacts
            let metrics = load_metrics_summary(&config)?;
            let analysis = load_analysis_summary(&config)?;
            stage_report(&config, &metrics, analysis.as_ref())?;
            println!(
                "report for run {} written to {}",
                config_hash(&config),
                config.out_dir.join("report.md").display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::from(error.exit_code() as u8)
        }
    }
}
