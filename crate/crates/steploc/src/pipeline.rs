//! Run orchestration: configuration, resumable stage execution over plain
//! JSONL/CSV artifacts, and assembly of the summaries the report renders.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{
    aggregate_importance, association_verdict, chi_square_2x2,
    forest::{train_depth_one_baseline, train_random_forest},
    load_annotations, prune_features, AnalysisError, ContingencyTable2x2,
};
use crate::corpus::{self, Corpus, CorpusError, CorpusStats, SchemaKind};
use crate::correction::{
    parse_correction, semantic_recall, CorrectionError, HashEmbedder, HttpEmbeddingTransport,
    RecallOrientation, RecallScore, RemoteEmbedder, TokenEmbedder,
};
use crate::features::{
    assemble_feature_vector, feature_matrix, load_sidecar, FeatureError, FeatureVector,
    FEATURE_ORDER,
};
use crate::gateway::{
    CacheOnlyBackend, Gateway, GatewayError, LiveBackend, MockBackend, ModelRequest, RetryPolicy,
    StatsSnapshot,
};
use crate::metrics::{
    distance_distribution_by_type, exact_accuracy, normalized_distance, random_baseline,
    random_baseline_predictions, window_rate, MetricsError, Prediction,
};
use crate::prompting::{
    parse_error_step, parse_final_answer, solver_stage2_messages, answers_equal, ParseStatus,
    PromptError, PromptLibrary, PromptSetting,
};
use crate::report;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(String),
    #[error("missing upstream artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("json error on {path}: {message}")]
    Json { path: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Correction(#[from] CorrectionError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl PipelineError {
    /// Process exit code: 1 config/io, 2 backend, 3 validation.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Io { .. } | PipelineError::Json { .. } => 1,
            PipelineError::Gateway(_) => 2,
            PipelineError::Correction(CorrectionError::Gateway(_)) => 2,
            _ => 3,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.display().to_string(), source }
}

/// Corpus input location and schema.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub path: PathBuf,
    pub schema: SchemaKind,
}

/// Which chat backend serves completions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Mock,
    Live,
    CacheOnly,
}

/// Model endpoint configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub model_id: String,
    pub backend: BackendChoice,
    #[serde(default)]
    pub mock_script: Option<PathBuf>,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
}

/// Which embedding provider scores semantic recall.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingProvider {
    Hash,
    Remote,
}

/// Embedding provider configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub provider: EmbeddingProvider,
    #[serde(default = "default_embedding_dimension")]
    pub dimension: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default)]
    pub api_key_env: Option<String>,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            provider: EmbeddingProvider::Hash,
            dimension: default_embedding_dimension(),
            seed: 0,
            endpoint: None,
            model: None,
            api_key_env: None,
        }
    }
}

fn default_embedding_dimension() -> usize {
    64
}
fn default_n_random_runs() -> u64 {
    100
}
fn default_few_shot_count() -> usize {
    2
}
fn default_parallelism() -> usize {
    4
}
fn default_prune_threshold() -> f64 {
    0.4
}
fn default_n_trees() -> usize {
    200
}
fn default_n_forest_seeds() -> u64 {
    10
}
fn default_distance_bins() -> usize {
    9
}
fn default_settings() -> Vec<PromptSetting> {
    vec![
        PromptSetting::WoS,
        PromptSetting::WGs,
        PromptSetting::WCor,
        PromptSetting::RandomBaseline,
    ]
}

/// Full run configuration; the JSON config file deserializes into this.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    #[serde(default = "default_settings")]
    pub settings: Vec<PromptSetting>,
    #[serde(default)]
    pub root_seed: u64,
    #[serde(default = "default_n_random_runs")]
    pub n_random_runs: u64,
    #[serde(default)]
    pub embedding: EmbeddingConfig,
    pub out_dir: PathBuf,
    /// Response cache directory; empty or missing means `<out_dir>/cache`.
    #[serde(default)]
    pub cache_dir: PathBuf,
    #[serde(default)]
    pub strict: bool,
    #[serde(default = "default_few_shot_count")]
    pub few_shot_count: usize,
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    #[serde(default)]
    pub templates_dir: Option<PathBuf>,
    #[serde(default)]
    pub sidecar_path: Option<PathBuf>,
    #[serde(default)]
    pub annotations_path: Option<PathBuf>,
    #[serde(default = "default_prune_threshold")]
    pub prune_threshold: f64,
    #[serde(default = "default_n_trees")]
    pub n_trees: usize,
    #[serde(default = "default_n_forest_seeds")]
    pub n_forest_seeds: u64,
    #[serde(default)]
    pub continuity_correction: bool,
    #[serde(default = "default_distance_bins")]
    pub distance_bins: usize,
}

impl RunConfig {
    /// Loads and validates a JSON config file.
    pub fn load(path: &Path) -> Result<RunConfig, PipelineError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|e| PipelineError::Json {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Checks cross-field constraints that serde cannot express.
    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::Config(m));
        if self.settings.is_empty() {
            return fail("at least one setting is required".into());
        }
        let mut seen = self.settings.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.settings.len() {
            return fail("settings contain duplicates".into());
        }
        if self.n_random_runs < 1 {
            return fail("n_random_runs must be at least 1".into());
        }
        if self.model.model_id.trim().is_empty() {
            return fail("model_id is empty".into());
        }
        match self.model.backend {
            BackendChoice::Mock if self.model.mock_script.is_none() => {
                return fail("mock backend requires mock_script".into());
            }
            BackendChoice::Live if self.model.endpoint.is_none() => {
                return fail("live backend requires endpoint".into());
            }
            _ => {}
        }
        if self.embedding.provider == EmbeddingProvider::Remote
            && (self.embedding.endpoint.is_none() || self.embedding.model.is_none())
        {
            return fail("remote embedding requires endpoint and model".into());
        }
        if self.embedding.dimension < 2 {
            return fail("embedding dimension must be at least 2".into());
        }
        if self.distance_bins < 3 || self.distance_bins % 2 == 0 {
            return fail("distance_bins must be odd and at least 3".into());
        }
        if self.n_trees < 1 || self.n_forest_seeds < 1 {
            return fail("n_trees and n_forest_seeds must be at least 1".into());
        }
        if !(self.prune_threshold > 0.0 && self.prune_threshold <= 1.0) {
            return fail("prune_threshold must be in (0, 1]".into());
        }
        Ok(())
    }

    fn model_settings(&self) -> Vec<PromptSetting> {
        self.settings
            .iter()
            .copied()
            .filter(|s| *s != PromptSetting::RandomBaseline)
            .collect()
    }
}

/// Identity of a run: SHA-256 over the canonical config JSON, excluding the
/// output and cache directories so relocating a run does not change it.
pub fn config_hash(config: &RunConfig) -> String {
    let mut value = serde_json::to_value(config).expect("serializable config");
    let map = value.as_object_mut().expect("config is a json object");
    map.remove("out_dir");
    map.remove("cache_dir");
    let mut hasher = Sha256::new();
    hasher.update(value.to_string().as_bytes());
    hex::encode(hasher.finalize())
}

/// One solved problem: the two-stage raw outputs and the answer verdict.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveRecord {
    pub problem_id: String,
    pub stage1_output: String,
    pub stage2_output: String,
    pub final_answer: Option<String>,
    pub solved: bool,
}

/// One correction attempt, valid only when the final answer matches gold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectionRecord {
    pub attempt_id: String,
    pub valid: bool,
    pub steps: Vec<String>,
    pub final_answer: Option<String>,
    pub answer_matches_gold: bool,
    pub step_ratio: f64,
    pub uncorrected_error_step: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
    pub raw_output: String,
}

/// One persisted prediction; excluded rows carry the reason and never score.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PredictionRow {
    pub attempt_id: String,
    pub model_id: String,
    pub setting: PromptSetting,
    pub predicted_step: Option<usize>,
    pub parse_status: ParseStatus,
    pub raw_output: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded: Option<String>,
}

impl PredictionRow {
    fn from_prediction(p: Prediction) -> PredictionRow {
        PredictionRow {
            attempt_id: p.attempt_id,
            model_id: p.model_id,
            setting: p.setting,
            predicted_step: p.predicted_step,
            parse_status: p.parse_status,
            raw_output: p.raw_output,
            excluded: None,
        }
    }

    /// Scoring view; None for excluded rows.
    pub fn to_prediction(&self) -> Option<Prediction> {
        if self.excluded.is_some() {
            return None;
        }
        Some(Prediction {
            attempt_id: self.attempt_id.clone(),
            model_id: self.model_id.clone(),
            setting: self.setting,
            predicted_step: self.predicted_step,
            parse_status: self.parse_status,
            raw_output: self.raw_output.clone(),
        })
    }
}

/// One feature table row: identity columns plus the assembled vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureRow {
    pub model_id: String,
    pub setting: PromptSetting,
    #[serde(flatten)]
    pub vector: FeatureVector,
}

/// Per-attempt recall scores against the gold and corrected references.
#[derive(Debug, Clone, Default)]
pub struct RecallTable {
    pub gold: BTreeMap<String, RecallScore>,
    pub corrected: BTreeMap<String, RecallScore>,
}

/// Aggregates written to results/summary_metrics.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub config_hash: String,
    pub model_id: String,
    pub dataset: String,
    pub n_problems: usize,
    pub n_attempts: usize,
    pub n_random_runs: u64,
    pub corpus_stats: CorpusStats,
    pub solve: Option<SolveSummary>,
    pub corrections: Option<CorrectionSummary>,
    pub settings: Vec<SettingSummary>,
    pub recall: Vec<RecallSummary>,
    pub distances: Vec<DistanceHistRow>,
}

/// One distance-histogram cell: predictions of one setting and error type
/// whose normalized signed distance falls in the bin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DistanceHistRow {
    pub setting: String,
    pub error_type: String,
    pub bin_center: f64,
    pub count: u64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SolveSummary {
    pub n_problems: usize,
    pub n_solved: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CorrectionSummary {
    pub total: usize,
    pub valid: usize,
    pub invalid: usize,
    /// Answer-matching corrections whose annotated error step is unchanged.
    pub uncorrected_error_step: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SettingSummary {
    pub setting: String,
    pub label: String,
    pub n_scored: usize,
    pub n_excluded: usize,
    pub n_unparsed: usize,
    pub accuracy: f64,
    pub incorrect_share: f64,
    pub window_1: Option<f64>,
    pub window_2: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecallSummary {
    pub reference: String,
    pub n: usize,
    pub n_empty_prefix: usize,
    pub mean: f64,
}

/// Aggregates written to analysis/summary_analysis.json.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub chi2: Vec<Chi2Row>,
    pub pruned_features: Vec<String>,
    pub importance: Vec<ImportanceRow>,
    pub fit: Vec<FitRow>,
    pub kappa: Vec<KappaRow>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Chi2Row {
    pub setting: String,
    pub label: String,
    pub a: u64,
    pub b: u64,
    pub c: u64,
    pub d: u64,
    pub chi2: Option<f64>,
    pub p: Option<f64>,
    pub phi: Option<f64>,
    pub verdict: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImportanceRow {
    pub feature: String,
    pub importance_pct: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitRow {
    pub setting: String,
    pub forest_f1_mean: f64,
    pub forest_accuracy_mean: f64,
    pub stump_f1: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KappaRow {
    pub metric: String,
    pub kappa: f64,
    pub n: usize,
}

/// Per-stage manifest note.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageNote {
    pub artifact: String,
    pub count: usize,
    pub reused: bool,
}

/// Run manifest: identity, per-stage notes, and gateway statistics. Unlike
/// the report bundle, the manifest differs between first runs and replays.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub model_id: String,
    pub settings: Vec<String>,
    pub stages: BTreeMap<String, StageNote>,
    pub cache: StatsSnapshot,
    pub ingest_skipped: usize,
    pub invalid_corrections: usize,
    pub uncorrected_error_steps: usize,
}

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Ingest,
    Solve,
    Correct,
    Localize,
    Metrics,
    Features,
    Analyze,
    Report,
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), PipelineError> {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(item).expect("serializable artifact"));
        out.push('\n');
    }
    fs::write(path, out).map_err(io_err(path))
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, PipelineError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        items.push(serde_json::from_str(&line).map_err(|e| PipelineError::Json {
            path: path.display().to_string(),
            message: format!("line {}: {}", i + 1, e),
        })?);
    }
    Ok(items)
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), PipelineError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable value");
    text.push('\n');
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, PipelineError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| PipelineError::Json {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Builds the prompt library from the configured template directory or the
/// built-in templates.
pub fn build_library(config: &RunConfig) -> Result<PromptLibrary, PipelineError> {
    let library = match &config.templates_dir {
        Some(dir) => PromptLibrary::from_dir(dir)?,
        None => PromptLibrary::builtin(),
    };
    Ok(library.with_few_shot_count(config.few_shot_count))
}

/// Builds the gateway for the configured backend, wired to the cache dir.
pub fn build_gateway(config: &RunConfig) -> Result<Gateway, PipelineError> {
    let backend: Box<dyn crate::gateway::ChatBackend> = match config.model.backend {
        BackendChoice::Mock => {
            let script = config
                .model
                .mock_script
                .as_ref()
                .ok_or_else(|| PipelineError::Config("mock backend requires mock_script".into()))?;
            Box::new(MockBackend::from_script(script)?)
        }
        BackendChoice::Live => {
            let endpoint = config
                .model
                .endpoint
                .as_ref()
                .ok_or_else(|| PipelineError::Config("live backend requires endpoint".into()))?;
            Box::new(LiveBackend::new(endpoint, config.model.api_key_env.as_deref())?)
        }
        BackendChoice::CacheOnly => Box::new(CacheOnlyBackend),
    };
    Ok(Gateway::new(
        backend,
        Some(effective_cache_dir(config)),
        RetryPolicy::default(),
        config.parallelism,
    )?)
}

/// The response cache directory, falling back to `<out_dir>/cache` when the
/// configuration leaves it empty.
pub fn effective_cache_dir(config: &RunConfig) -> PathBuf {
    if config.cache_dir.as_os_str().is_empty() {
        config.out_dir.join("cache")
    } else {
        config.cache_dir.clone()
    }
}

/// Builds the token embedder for the configured provider.
pub fn build_embedder(config: &RunConfig) -> Result<Box<dyn TokenEmbedder>, PipelineError> {
    match config.embedding.provider {
        EmbeddingProvider::Hash => {
            Ok(Box::new(HashEmbedder::new(config.embedding.dimension, config.embedding.seed)))
        }
        EmbeddingProvider::Remote => {
            let endpoint = config.embedding.endpoint.as_ref().ok_or_else(|| {
                PipelineError::Config("remote embedding requires endpoint".into())
            })?;
            let model = config
                .embedding
                .model
                .as_ref()
                .ok_or_else(|| PipelineError::Config("remote embedding requires model".into()))?;
            let transport =
                HttpEmbeddingTransport::new(endpoint, config.embedding.api_key_env.as_deref())?;
            Ok(Box::new(RemoteEmbedder::new(
                model,
                config.embedding.dimension,
                Box::new(transport),
            )))
        }
    }
}

fn canonical_corpus_path(config: &RunConfig) -> PathBuf {
    config.out_dir.join("corpus.jsonl")
}

/// Ingests the configured corpus, or reloads the canonical artifact when the
/// stage already ran. Returns the corpus, a stage note, and the skip count.
pub fn stage_ingest(config: &RunConfig) -> Result<(Corpus, StageNote, usize), PipelineError> {
    let canonical = canonical_corpus_path(config);
    if canonical.exists() {
        let report = corpus::ingest(&canonical, SchemaKind::Canonical, true)?;
        let note = StageNote {
            artifact: "corpus.jsonl".into(),
            count: report.corpus.attempts.len(),
            reused: true,
        };
        return Ok((report.corpus, note, 0));
    }
    let report = corpus::ingest(&config.corpus.path, config.corpus.schema, config.strict)?;
    report.corpus.write_canonical(&canonical)?;
    let note = StageNote {
        artifact: "corpus.jsonl".into(),
        count: report.corpus.attempts.len(),
        reused: false,
    };
    Ok((report.corpus, note, report.skipped.len()))
}

/// Runs the two-stage solver over every problem, or reloads solutions.jsonl.
pub fn stage_solve(
    config: &RunConfig,
    corpus: &Corpus,
    gateway: &Gateway,
    library: &PromptLibrary,
) -> Result<(Vec<SolveRecord>, StageNote), PipelineError> {
    let path = config.out_dir.join("solutions.jsonl");
    if path.exists() {
        let records: Vec<SolveRecord> = read_jsonl(&path)?;
        let note =
            StageNote { artifact: "solutions.jsonl".into(), count: records.len(), reused: true };
        return Ok((records, note));
    }
    let model_id = &config.model.model_id;
    let mut stage1_requests = Vec::new();
    let mut suffixes = Vec::new();
    for problem in &corpus.problems {
        let (messages, suffix) = library.build_solver_prompts(problem);
        stage1_requests.push(ModelRequest::new(model_id, messages.clone()));
        suffixes.push((messages, suffix));
    }
    let stage1_raw = collect_batch(gateway.complete_many(&stage1_requests))?;

    let mut stage2_requests = Vec::new();
    for ((initial, suffix), raw) in suffixes.iter().zip(&stage1_raw) {
        let messages = solver_stage2_messages(initial, raw, suffix);
        stage2_requests.push(ModelRequest::new(model_id, messages));
    }
    let stage2_raw = collect_batch(gateway.complete_many(&stage2_requests))?;

    let mut records = Vec::new();
    for ((problem, raw1), raw2) in corpus.problems.iter().zip(stage1_raw).zip(stage2_raw) {
        let final_answer = parse_final_answer(&raw2).ok();
        let solved = final_answer
            .as_deref()
            .is_some_and(|a| answers_equal(a, &problem.gold_final_answer));
        records.push(SolveRecord {
            problem_id: problem.id.clone(),
            stage1_output: raw1,
            stage2_output: raw2,
            final_answer,
            solved,
        });
    }
    write_jsonl(&path, &records)?;
    let note =
        StageNote { artifact: "solutions.jsonl".into(), count: records.len(), reused: false };
    Ok((records, note))
}

/// Generates gold-guided corrections for every attempt, or reloads them.
pub fn stage_correct(
    config: &RunConfig,
    corpus: &Corpus,
    gateway: &Gateway,
    library: &PromptLibrary,
) -> Result<(Vec<CorrectionRecord>, StageNote), PipelineError> {
    let path = config.out_dir.join("corrections.jsonl");
    if path.exists() {
        let records: Vec<CorrectionRecord> = read_jsonl(&path)?;
        let note = StageNote {
            artifact: "corrections.jsonl".into(),
            count: records.len(),
            reused: true,
        };
        return Ok((records, note));
    }
    let requests: Vec<ModelRequest> = corpus
        .attempts
        .iter()
        .map(|attempt| {
            let problem = corpus.problem_for(attempt);
            ModelRequest::new(&config.model.model_id, library.build_correction_prompt(problem, attempt))
        })
        .collect();
    let raw = collect_batch(gateway.complete_many(&requests))?;
    let mut records = Vec::new();
    for (attempt, output) in corpus.attempts.iter().zip(raw) {
        let problem = corpus.problem_for(attempt);
        let record = match parse_correction(&output, problem, attempt) {
            Ok(result) => CorrectionRecord {
                attempt_id: attempt.id.clone(),
                valid: result.answer_matches_gold,
                steps: result.steps,
                final_answer: Some(result.final_answer),
                answer_matches_gold: result.answer_matches_gold,
                step_ratio: result.step_ratio,
                uncorrected_error_step: result.uncorrected_error_step,
                failure: if result.answer_matches_gold {
                    None
                } else {
                    Some("answer_mismatch".into())
                },
                raw_output: result.raw_output,
            },
            Err(CorrectionError::Gateway(e)) => return Err(PipelineError::Gateway(e)),
            Err(e) => CorrectionRecord {
                attempt_id: attempt.id.clone(),
                valid: false,
                steps: Vec::new(),
                final_answer: None,
                answer_matches_gold: false,
                step_ratio: 0.0,
                uncorrected_error_step: false,
                failure: Some(e.to_string()),
                raw_output: output,
            },
        };
        records.push(record);
    }
    write_jsonl(&path, &records)?;
    let note =
        StageNote { artifact: "corrections.jsonl".into(), count: records.len(), reused: false };
    Ok((records, note))
}

fn collect_batch(
    results: Vec<Result<crate::gateway::ModelResponse, GatewayError>>,
) -> Result<Vec<String>, PipelineError> {
    results
        .into_iter()
        .map(|r| r.map(|resp| resp.text).map_err(PipelineError::from))
        .collect()
}

fn predictions_path(config: &RunConfig, setting: PromptSetting) -> PathBuf {
    config.out_dir.join(format!("predictions_{}.jsonl", setting.key()))
}

/// Localizes the first error under one setting, or reloads its predictions.
/// Attempts with invalid corrections are persisted as excluded rows under
/// the corrected-reference setting.
pub fn stage_localize(
    config: &RunConfig,
    corpus: &Corpus,
    corrections: Option<&[CorrectionRecord]>,
    gateway: Option<&Gateway>,
    library: &PromptLibrary,
    setting: PromptSetting,
) -> Result<(Vec<PredictionRow>, StageNote), PipelineError> {
    let path = predictions_path(config, setting);
    let artifact = path.file_name().expect("file name").to_string_lossy().to_string();
    if path.exists() {
        let rows: Vec<PredictionRow> = read_jsonl(&path)?;
        let note = StageNote { artifact, count: rows.len(), reused: true };
        return Ok((rows, note));
    }
    let rows = match setting {
        PromptSetting::RandomBaseline => {
            random_baseline_predictions(&corpus.attempts, config.root_seed, 0)
                .into_iter()
                .map(PredictionRow::from_prediction)
                .collect::<Vec<_>>()
        }
        _ => {
            let gateway = gateway.ok_or_else(|| {
                PipelineError::Config(format!("setting {} needs a model backend", setting.key()))
            })?;
            let correction_map: BTreeMap<&str, &CorrectionRecord> = corrections
                .unwrap_or(&[])
                .iter()
                .map(|c| (c.attempt_id.as_str(), c))
                .collect();
            let mut requests = Vec::new();
            let mut slots: Vec<Result<usize, String>> = Vec::new();
            for attempt in &corpus.attempts {
                let problem = corpus.problem_for(attempt);
                let reference: Option<Vec<String>> = match setting {
                    PromptSetting::WGs => Some(problem.gold_steps.clone()),
                    PromptSetting::WCor => {
                        let record = correction_map.get(attempt.id.as_str()).ok_or_else(|| {
                            PipelineError::MissingArtifact(
                                config.out_dir.join("corrections.jsonl"),
                            )
                        })?;
                        if !record.valid {
                            slots.push(Err("invalid_correction".into()));
                            continue;
                        }
                        Some(record.steps.clone())
                    }
                    _ => None,
                };
                let messages =
                    library.build_prompt(setting, problem, attempt, reference.as_deref())?;
                slots.push(Ok(requests.len()));
                requests.push(ModelRequest::new(&config.model.model_id, messages));
            }
            let raw = collect_batch(gateway.complete_many(&requests))?;
            corpus
                .attempts
                .iter()
                .zip(slots)
                .map(|(attempt, slot)| match slot {
                    Ok(i) => {
                        let output = &raw[i];
                        let (step, status) = parse_error_step(output, attempt.steps.len());
                        PredictionRow {
                            attempt_id: attempt.id.clone(),
                            model_id: config.model.model_id.clone(),
                            setting,
                            predicted_step: step,
                            parse_status: status,
                            raw_output: output.clone(),
                            excluded: None,
                        }
                    }
                    Err(reason) => PredictionRow {
                        attempt_id: attempt.id.clone(),
                        model_id: config.model.model_id.clone(),
                        setting,
                        predicted_step: None,
                        parse_status: ParseStatus::Unparsed,
                        raw_output: String::new(),
                        excluded: Some(reason),
                    },
                })
                .collect()
        }
    };
    write_jsonl(&path, &rows)?;
    let note = StageNote { artifact, count: rows.len(), reused: false };
    Ok((rows, note))
}

/// Scores semantic recall for every attempt against the gold solution, and
/// against the corrected solution where a valid correction exists.
pub fn compute_recalls(
    corpus: &Corpus,
    corrections: Option<&[CorrectionRecord]>,
    embedder: &dyn TokenEmbedder,
) -> Result<RecallTable, PipelineError> {
    let mut table = RecallTable::default();
    for attempt in &corpus.attempts {
        let problem = corpus.problem_for(attempt);
        let score = semantic_recall(
            &problem.gold_steps,
            &attempt.steps,
            attempt.first_error_index,
            embedder,
            RecallOrientation::StudentPrefix,
        )?;
        table.gold.insert(attempt.id.clone(), score);
    }
    if let Some(corrections) = corrections {
        let by_id: BTreeMap<&str, &CorrectionRecord> =
            corrections.iter().map(|c| (c.attempt_id.as_str(), c)).collect();
        for attempt in &corpus.attempts {
            let Some(record) = by_id.get(attempt.id.as_str()) else { continue };
            if !record.valid || record.steps.is_empty() {
                continue;
            }
            let score = semantic_recall(
                &record.steps,
                &attempt.steps,
                attempt.first_error_index,
                embedder,
                RecallOrientation::StudentPrefix,
            )?;
            table.corrected.insert(attempt.id.clone(), score);
        }
    }
    Ok(table)
}

fn fmtf(v: f64, places: usize) -> String {
    format!("{v:.places$}")
}

fn recall_summaries(recalls: &RecallTable) -> Vec<RecallSummary> {
    let mut rows = Vec::new();
    for (reference, map) in [("gold", &recalls.gold), ("corrected", &recalls.corrected)] {
        if map.is_empty() {
            continue;
        }
        let n = map.len();
        let mean = map.values().map(|s| s.value).sum::<f64>() / n as f64;
        let n_empty = map.values().filter(|s| s.empty_prefix).count();
        rows.push(RecallSummary {
            reference: reference.to_string(),
            n,
            n_empty_prefix: n_empty,
            mean,
        });
    }
    rows
}

/// Computes accuracy, windows, and distance distributions for every configured
/// setting, writes results/*.csv, and returns the metrics summary.
#[allow(clippy::too_many_arguments)]
pub fn stage_metrics(
    config: &RunConfig,
    hash: &str,
    corpus: &Corpus,
    solve: Option<&[SolveRecord]>,
    corrections: Option<&[CorrectionRecord]>,
    predictions: &BTreeMap<PromptSetting, Vec<PredictionRow>>,
    recalls: &RecallTable,
) -> Result<MetricsSummary, PipelineError> {
    let results_dir = config.out_dir.join("results");
    fs::create_dir_all(&results_dir).map_err(io_err(&results_dir))?;
    let attempts = &corpus.attempts;

    let mut setting_rows = Vec::new();
    let mut accuracy_csv = Vec::new();
    let mut window_csv = Vec::new();
    let mut hist_rows: Vec<DistanceHistRow> = Vec::new();
    for &setting in &config.settings {
        let (scored, n_excluded): (Vec<Prediction>, usize) = match setting {
            PromptSetting::RandomBaseline => {
                let pooled: Vec<Prediction> = (0..config.n_random_runs)
                    .flat_map(|run| {
                        random_baseline_predictions(attempts, config.root_seed, run)
                    })
                    .collect();
                (pooled, 0)
            }
            _ => {
                let rows = predictions.get(&setting).ok_or_else(|| {
                    PipelineError::MissingArtifact(predictions_path(config, setting))
                })?;
                let scored: Vec<Prediction> =
                    rows.iter().filter_map(PredictionRow::to_prediction).collect();
                let excluded = rows.len() - scored.len();
                (scored, excluded)
            }
        };
        if scored.is_empty() {
            return Err(PipelineError::Metrics(MetricsError::NoPredictions));
        }
        let accuracy = match setting {
            // mean accuracy over the seeded runs, not the pooled pool
            PromptSetting::RandomBaseline => {
                random_baseline(attempts, config.n_random_runs, config.root_seed)?
            }
            _ => exact_accuracy(&scored, attempts)?,
        };
        let incorrect = 100.0 - accuracy;
        let window_1 = window_rate(&scored, attempts, 1)?;
        let window_2 = window_rate(&scored, attempts, 2)?;
        let n_unparsed =
            scored.iter().filter(|p| p.parse_status == ParseStatus::Unparsed).count();
        let n_scored = match setting {
            PromptSetting::RandomBaseline => attempts.len(),
            _ => scored.len(),
        };

        let mut distance_records = Vec::new();
        let attempt_map: BTreeMap<&str, &crate::corpus::StudentAttempt> =
            attempts.iter().map(|a| (a.id.as_str(), a)).collect();
        for prediction in &scored {
            let attempt = attempt_map[prediction.attempt_id.as_str()];
            if let Some(record) = normalized_distance(prediction, attempt) {
                distance_records.push(record);
            }
        }
        for bin in distance_distribution_by_type(&distance_records, config.distance_bins)? {
            hist_rows.push(DistanceHistRow {
                setting: setting.key().to_string(),
                error_type: bin.error_type,
                bin_center: bin.bin_center,
                count: bin.count,
            });
        }

        accuracy_csv.push(vec![
            setting.key().to_string(),
            setting.label().to_string(),
            corpus_label(corpus).to_string(),
            n_scored.to_string(),
            n_excluded.to_string(),
            fmtf(accuracy, 4),
            fmtf(incorrect, 4),
            hash.to_string(),
        ]);
        for (k, rate) in [(1usize, window_1), (2usize, window_2)] {
            window_csv.push(vec![
                setting.key().to_string(),
                k.to_string(),
                rate.map(|r| fmtf(r, 4)).unwrap_or_default(),
                hash.to_string(),
            ]);
        }
        setting_rows.push(SettingSummary {
            setting: setting.key().to_string(),
            label: setting.label().to_string(),
            n_scored,
            n_excluded,
            n_unparsed,
            accuracy,
            incorrect_share: incorrect,
            window_1,
            window_2,
        });
    }

    report::write_csv(
        &results_dir.join("accuracy.csv"),
        "setting,label,dataset,n_scored,n_excluded,accuracy_pct,incorrect_pct,config_hash",
        &accuracy_csv,
    )
    .map_err(io_err(&results_dir.join("accuracy.csv")))?;
    report::write_csv(
        &results_dir.join("windows.csv"),
        "setting,k,rate_pct,config_hash",
        &window_csv,
    )
    .map_err(io_err(&results_dir.join("windows.csv")))?;
    let hist_csv: Vec<Vec<String>> = hist_rows
        .iter()
        .map(|r| {
            vec![
                r.setting.clone(),
                r.error_type.clone(),
                fmtf(r.bin_center, 4),
                r.count.to_string(),
                hash.to_string(),
            ]
        })
        .collect();
    report::write_csv(
        &results_dir.join("distance_hist.csv"),
        "setting,error_type,bin_center,count,config_hash",
        &hist_csv,
    )
    .map_err(io_err(&results_dir.join("distance_hist.csv")))?;

    let stats = corpus::dataset_stats(corpus);
    let stats_csv: Vec<Vec<String>> = stats
        .dimensions
        .iter()
        .map(|d| {
            vec![
                d.dimension.clone(),
                fmtf(d.min, 4),
                fmtf(d.max, 4),
                fmtf(d.median, 4),
                fmtf(d.mean, 4),
                fmtf(d.std, 4),
                hash.to_string(),
            ]
        })
        .collect();
    report::write_csv(
        &results_dir.join("corpus_stats.csv"),
        "dimension,min,max,median,mean,std,config_hash",
        &stats_csv,
    )
    .map_err(io_err(&results_dir.join("corpus_stats.csv")))?;

    let recall_rows = recall_summaries(recalls);
    let recall_csv: Vec<Vec<String>> = recall_rows
        .iter()
        .map(|r| {
            vec![
                r.reference.clone(),
                r.n.to_string(),
                r.n_empty_prefix.to_string(),
                fmtf(r.mean, 6),
                hash.to_string(),
            ]
        })
        .collect();
    report::write_csv(
        &results_dir.join("semantic_recall.csv"),
        "reference,n,n_empty_prefix,mean_recall,config_hash",
        &recall_csv,
    )
    .map_err(io_err(&results_dir.join("semantic_recall.csv")))?;

    let summary = MetricsSummary {
        config_hash: hash.to_string(),
        model_id: config.model.model_id.clone(),
        dataset: corpus_label(corpus).to_string(),
        n_problems: corpus.problems.len(),
        n_attempts: attempts.len(),
        n_random_runs: config.n_random_runs,
        corpus_stats: stats,
        solve: solve.map(|records| SolveSummary {
            n_problems: records.len(),
            n_solved: records.iter().filter(|r| r.solved).count(),
        }),
        corrections: corrections.map(|records| CorrectionSummary {
            total: records.len(),
            valid: records.iter().filter(|r| r.valid).count(),
            invalid: records.iter().filter(|r| !r.valid).count(),
            uncorrected_error_step: records
                .iter()
                .filter(|r| r.uncorrected_error_step)
                .count(),
        }),
        settings: setting_rows,
        recall: recall_rows,
        distances: hist_rows,
    };
    write_json_pretty(&results_dir.join("summary_metrics.json"), &summary)?;
    Ok(summary)
}

fn corpus_label(corpus: &Corpus) -> &'static str {
    corpus.problems.first().map(|p| p.source.label()).unwrap_or("empty")
}

/// Assembles the feature table for the scored model settings and writes
/// features.csv.
pub fn stage_features(
    config: &RunConfig,
    hash: &str,
    corpus: &Corpus,
    solve: &[SolveRecord],
    predictions: &BTreeMap<PromptSetting, Vec<PredictionRow>>,
    recalls: &RecallTable,
) -> Result<Vec<FeatureRow>, PipelineError> {
    let sidecar = match &config.sidecar_path {
        Some(path) => Some(load_sidecar(path)?),
        None => None,
    };
    let solved_by_problem: BTreeMap<&str, bool> =
        solve.iter().map(|r| (r.problem_id.as_str(), r.solved)).collect();
    let mut rows = Vec::new();
    for &setting in &config.settings {
        if setting == PromptSetting::RandomBaseline {
            continue;
        }
        let Some(prediction_rows) = predictions.get(&setting) else { continue };
        for row in prediction_rows {
            let Some(prediction) = row.to_prediction() else { continue };
            let attempt = corpus
                .attempts
                .iter()
                .find(|a| a.id == row.attempt_id)
                .ok_or_else(|| PipelineError::Metrics(MetricsError::UnknownAttempt(
                    row.attempt_id.clone(),
                )))?;
            let problem = corpus.problem_for(attempt);
            let recall = match setting {
                PromptSetting::WCor => recalls.corrected.get(&attempt.id),
                _ => recalls.gold.get(&attempt.id),
            }
            .map(|s| s.value)
            .unwrap_or(0.0);
            let solved = *solved_by_problem.get(problem.id.as_str()).unwrap_or(&false);
            let vector = assemble_feature_vector(
                problem,
                attempt,
                &prediction,
                recall,
                solved,
                sidecar.as_ref(),
            )?;
            rows.push(FeatureRow {
                model_id: config.model.model_id.clone(),
                setting,
                vector,
            });
        }
    }

    let mut csv_rows = Vec::new();
    for row in &rows {
        let mut fields = vec![
            row.model_id.clone(),
            row.setting.key().to_string(),
            row.vector.attempt_id.clone(),
        ];
        for name in FEATURE_ORDER {
            let text = match name {
                "q_fkgl" | "g_op_diversity" | "g_param_usage" | "rel_error_step_loc" => {
                    fmtf(row.vector.numeric(name).expect("always present"), 4)
                }
                "semantic_recall" => fmtf(row.vector.semantic_recall, 6),
                "q_tree_depth" => {
                    row.vector.q_tree_depth.map(|v| fmtf(v, 4)).unwrap_or_default()
                }
                "q_np_count" => {
                    row.vector.q_np_count.map(|v| v.to_string()).unwrap_or_default()
                }
                "error_type" => row
                    .vector
                    .error_type
                    .map(|t| t.label().to_string())
                    .unwrap_or_else(|| "untyped".into()),
                _ => {
                    let v = row.vector.numeric(name).expect("always present");
                    (v as i64).to_string()
                }
            };
            fields.push(text);
        }
        fields.push(row.vector.label_localized.to_string());
        fields.push(hash.to_string());
        csv_rows.push(fields);
    }
    let header = {
        let mut columns = vec!["model_id", "setting", "attempt_id"];
        columns.extend(FEATURE_ORDER);
        columns.push("label_localized");
        columns.push("config_hash");
        columns.join(",")
    };
    let path = config.out_dir.join("features.csv");
    report::write_csv(&path, &header, &csv_rows).map_err(io_err(&path))?;
    Ok(rows)
}

fn select_columns(
    names: &[String],
    columns: &[Vec<f64>],
    wanted: &[String],
) -> (Vec<String>, Vec<Vec<f64>>) {
    let mut out_names = Vec::new();
    let mut out_columns = Vec::new();
    for name in wanted {
        if let Some(i) = names.iter().position(|n| n == name) {
            out_names.push(name.clone());
            out_columns.push(columns[i].clone());
        }
    }
    (out_names, out_columns)
}

/// Runs pruning, forests, contingency tests, and agreement; writes
/// analysis/*.csv and the analysis summary.
pub fn stage_analyze(
    config: &RunConfig,
    hash: &str,
    corpus: &Corpus,
    solve: &[SolveRecord],
    predictions: &BTreeMap<PromptSetting, Vec<PredictionRow>>,
    feature_rows: &[FeatureRow],
) -> Result<AnalysisSummary, PipelineError> {
    let analysis_dir = config.out_dir.join("analysis");
    fs::create_dir_all(&analysis_dir).map_err(io_err(&analysis_dir))?;
    let mut notes = Vec::new();

    let solved_by_problem: BTreeMap<&str, bool> =
        solve.iter().map(|r| (r.problem_id.as_str(), r.solved)).collect();
    let attempt_problem: BTreeMap<&str, &str> = corpus
        .attempts
        .iter()
        .map(|a| (a.id.as_str(), a.problem_id.as_str()))
        .collect();

    // contingency tests per model setting
    let mut chi2_rows = Vec::new();
    for &setting in &config.settings {
        if setting == PromptSetting::RandomBaseline {
            continue;
        }
        let Some(rows) = predictions.get(&setting) else { continue };
        let mut solved_vec = Vec::new();
        let mut localized_vec = Vec::new();
        for row in rows {
            let Some(prediction) = row.to_prediction() else { continue };
            let problem_id = attempt_problem[row.attempt_id.as_str()];
            let attempt = corpus
                .attempts
                .iter()
                .find(|a| a.id == row.attempt_id)
                .expect("prediction rows come from corpus attempts");
            solved_vec.push(*solved_by_problem.get(problem_id).unwrap_or(&false));
            localized_vec.push(prediction.predicted_step == Some(attempt.first_error_index));
        }
        if solved_vec.is_empty() {
            notes.push(format!("chi2 {}: no scored predictions", setting.key()));
            continue;
        }
        let table = ContingencyTable2x2::from_outcomes(&solved_vec, &localized_vec)?;
        let row = match chi_square_2x2(&table, config.continuity_correction) {
            Ok(outcome) => Chi2Row {
                setting: setting.key().into(),
                label: setting.label().into(),
                a: table.a,
                b: table.b,
                c: table.c,
                d: table.d,
                chi2: Some(outcome.chi2),
                p: Some(outcome.p),
                phi: Some(outcome.phi),
                verdict: association_verdict(outcome.p, outcome.phi).into(),
            },
            Err(AnalysisError::ZeroMarginal) => {
                notes.push(format!("chi2 {}: zero marginal, test undefined", setting.key()));
                Chi2Row {
                    setting: setting.key().into(),
                    label: setting.label().into(),
                    a: table.a,
                    b: table.b,
                    c: table.c,
                    d: table.d,
                    chi2: None,
                    p: None,
                    phi: None,
                    verdict: "undefined".into(),
                }
            }
            Err(e) => return Err(e.into()),
        };
        chi2_rows.push(row);
    }

    // greedy pruning on the pooled table, then per-setting forests
    let mut pruned: Vec<String> = Vec::new();
    let mut importance_rows = Vec::new();
    let mut fit_rows = Vec::new();
    let pooled: Vec<FeatureVector> = feature_rows.iter().map(|r| r.vector.clone()).collect();
    if pooled.len() < 3 {
        notes.push("importance: fewer than 3 feature rows, analysis skipped".into());
    } else {
        let matrix = feature_matrix(&pooled);
        pruned = prune_features(&matrix.names, &matrix.columns, config.prune_threshold)?;
        let mut weighted: Vec<(f64, Vec<f64>)> = Vec::new();
        for &setting in &config.settings {
            if setting == PromptSetting::RandomBaseline {
                continue;
            }
            let vectors: Vec<FeatureVector> = feature_rows
                .iter()
                .filter(|r| r.setting == setting)
                .map(|r| r.vector.clone())
                .collect();
            if vectors.is_empty() {
                continue;
            }
            let setting_matrix = feature_matrix(&vectors);
            let (names, columns) =
                select_columns(&setting_matrix.names, &setting_matrix.columns, &pruned);
            let labels = setting_matrix.labels;
            let mut f1_sum = 0.0;
            let mut accuracy_sum = 0.0;
            let mut trained = 0u64;
            for s in 0..config.n_forest_seeds {
                match train_random_forest(
                    &columns,
                    &names,
                    &labels,
                    config.n_trees,
                    config.root_seed.wrapping_add(s),
                ) {
                    Ok(model) => {
                        f1_sum += model.fit_f1;
                        accuracy_sum += model.fit_accuracy;
                        weighted.push((model.fit_accuracy, model.importances.clone()));
                        trained += 1;
                    }
                    Err(e @ (AnalysisError::TooFewRows { .. }
                    | AnalysisError::SingleClassLabels)) => {
                        notes.push(format!("forest {}: {}", setting.key(), e));
                        break;
                    }
                    Err(e) => return Err(e.into()),
                }
            }
            if trained > 0 {
                let stump = train_depth_one_baseline(&columns, &names, &labels)?;
                fit_rows.push(FitRow {
                    setting: setting.key().into(),
                    forest_f1_mean: f1_sum / trained as f64,
                    forest_accuracy_mean: accuracy_sum / trained as f64,
                    stump_f1: stump.fit_f1,
                });
            }
        }
        if weighted.is_empty() {
            notes.push("importance: no trainable setting".into());
        } else {
            let aggregated = aggregate_importance(&weighted)?;
            let mut rows: Vec<ImportanceRow> = pruned
                .iter()
                .zip(&aggregated)
                .map(|(feature, pct)| ImportanceRow {
                    feature: feature.clone(),
                    importance_pct: *pct,
                })
                .collect();
            rows.sort_by(|a, b| {
                b.importance_pct
                    .total_cmp(&a.importance_pct)
                    .then_with(|| a.feature.cmp(&b.feature))
            });
            importance_rows = rows;
        }
    }

    // annotation agreement, when provided
    let mut kappa_rows = Vec::new();
    if let Some(path) = &config.annotations_path {
        let annotations = load_annotations(path)?;
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for row in &annotations {
            *counts.entry(row.metric.clone()).or_insert(0) += 1;
        }
        for (metric, kappa) in crate::analysis::kappa_by_metric(&annotations)? {
            kappa_rows.push(KappaRow { n: counts[&metric], metric, kappa });
        }
    }

    let importance_csv: Vec<Vec<String>> = importance_rows
        .iter()
        .map(|r| vec![r.feature.clone(), fmtf(r.importance_pct, 4), hash.to_string()])
        .collect();
    report::write_csv(
        &analysis_dir.join("importance.csv"),
        "feature,importance_pct,config_hash",
        &importance_csv,
    )
    .map_err(io_err(&analysis_dir.join("importance.csv")))?;

    let chi2_csv: Vec<Vec<String>> = chi2_rows
        .iter()
        .map(|r| {
            vec![
                config.model.model_id.clone(),
                r.setting.clone(),
                corpus_label(corpus).to_string(),
                r.a.to_string(),
                r.b.to_string(),
                r.c.to_string(),
                r.d.to_string(),
                r.chi2.map(|v| fmtf(v, 4)).unwrap_or_default(),
                r.p.map(|v| fmtf(v, 4)).unwrap_or_default(),
                r.phi.map(|v| fmtf(v, 4)).unwrap_or_default(),
                r.verdict.clone(),
                hash.to_string(),
            ]
        })
        .collect();
    report::write_csv(
        &analysis_dir.join("chi2.csv"),
        "model,setting,dataset,a,b,c,d,chi2,p,phi,verdict,config_hash",
        &chi2_csv,
    )
    .map_err(io_err(&analysis_dir.join("chi2.csv")))?;

    let kappa_csv: Vec<Vec<String>> = kappa_rows
        .iter()
        .map(|r| vec![r.metric.clone(), fmtf(r.kappa, 4), r.n.to_string(), hash.to_string()])
        .collect();
    report::write_csv(
        &analysis_dir.join("kappa.csv"),
        "metric,kappa,n,config_hash",
        &kappa_csv,
    )
    .map_err(io_err(&analysis_dir.join("kappa.csv")))?;

    let summary = AnalysisSummary {
        chi2: chi2_rows,
        pruned_features: pruned,
        importance: importance_rows,
        fit: fit_rows,
        kappa: kappa_rows,
        notes,
    };
    write_json_pretty(&analysis_dir.join("summary_analysis.json"), &summary)?;
    Ok(summary)
}

/// Renders report.md from the stage summaries.
pub fn stage_report(
    config: &RunConfig,
    metrics: &MetricsSummary,
    analysis: Option<&AnalysisSummary>,
) -> Result<(), PipelineError> {
    let text = report::render_markdown(metrics, analysis);
    let path = config.out_dir.join("report.md");
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(())
}

/// Executes the pipeline through `upto`, resuming gateway-bound stages from
/// their artifacts and recomputing the pure stages deterministically. Writes
/// manifest.json and returns the manifest.
pub fn run_eval(config: &RunConfig, upto: Stage) -> Result<Manifest, PipelineError> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir).map_err(io_err(&config.out_dir))?;
    let hash = config_hash(config);
    let library = build_library(config)?;

    let mut stages = BTreeMap::new();
    let (corpus, ingest_note, ingest_skipped) = stage_ingest(config)?;
    stages.insert("ingest".to_string(), ingest_note);

    let needs_model = !config.model_settings().is_empty();
    let needs_corrections = config.settings.contains(&PromptSetting::WCor);
    let mut gateway: Option<Gateway> = None;
    let ensure_gateway = |gateway: &mut Option<Gateway>| -> Result<(), PipelineError> {
        if gateway.is_none() {
            *gateway = Some(build_gateway(config)?);
        }
        Ok(())
    };

    let mut solve_records: Option<Vec<SolveRecord>> = None;
    if needs_model && upto >= Stage::Solve {
        ensure_gateway(&mut gateway)?;
        let (records, note) =
            stage_solve(config, &corpus, gateway.as_ref().expect("gateway"), &library)?;
        stages.insert("solve".to_string(), note);
        solve_records = Some(records);
    }

    let mut corrections: Option<Vec<CorrectionRecord>> = None;
    if needs_corrections && upto >= Stage::Correct {
        ensure_gateway(&mut gateway)?;
        let (records, note) =
            stage_correct(config, &corpus, gateway.as_ref().expect("gateway"), &library)?;
        stages.insert("correct".to_string(), note);
        corrections = Some(records);
    }

    let mut predictions: BTreeMap<PromptSetting, Vec<PredictionRow>> = BTreeMap::new();
    if upto >= Stage::Localize {
        for &setting in &config.settings {
            if setting != PromptSetting::RandomBaseline {
                ensure_gateway(&mut gateway)?;
            }
            let (rows, note) = stage_localize(
                config,
                &corpus,
                corrections.as_deref(),
                gateway.as_ref(),
                &library,
                setting,
            )?;
            stages.insert(format!("localize_{}", setting.key()), note);
            predictions.insert(setting, rows);
        }
    }

    if upto >= Stage::Metrics {
        let embedder = build_embedder(config)?;
        let recalls = compute_recalls(&corpus, corrections.as_deref(), embedder.as_ref())?;
        let metrics_summary = stage_metrics(
            config,
            &hash,
            &corpus,
            solve_records.as_deref(),
            corrections.as_deref(),
            &predictions,
            &recalls,
        )?;
        stages.insert(
            "metrics".to_string(),
            StageNote {
                artifact: "results/summary_metrics.json".into(),
                count: metrics_summary.settings.len(),
                reused: false,
            },
        );

        if needs_model && upto >= Stage::Features {
            let rows = stage_features(
                config,
                &hash,
                &corpus,
                solve_records.as_deref().unwrap_or(&[]),
                &predictions,
                &recalls,
            )?;
            stages.insert(
                "features".to_string(),
                StageNote { artifact: "features.csv".into(), count: rows.len(), reused: false },
            );

            if upto >= Stage::Analyze {
                let summary = stage_analyze(
                    config,
                    &hash,
                    &corpus,
                    solve_records.as_deref().unwrap_or(&[]),
                    &predictions,
                    &rows,
                )?;
                stages.insert(
                    "analyze".to_string(),
                    StageNote {
                        artifact: "analysis/summary_analysis.json".into(),
                        count: summary.importance.len(),
                        reused: false,
                    },
                );
                if upto >= Stage::Report {
                    stage_report(config, &metrics_summary, Some(&summary))?;
                    stages.insert(
                        "report".to_string(),
                        StageNote { artifact: "report.md".into(), count: 1, reused: false },
                    );
                }
            }
        } else if upto >= Stage::Report {
            stage_report(config, &metrics_summary, None)?;
            stages.insert(
                "report".to_string(),
                StageNote { artifact: "report.md".into(), count: 1, reused: false },
            );
        }
    }

    let manifest = Manifest {
        config_hash: hash,
        model_id: config.model.model_id.clone(),
        settings: config.settings.iter().map(|s| s.key().to_string()).collect(),
        stages,
        cache: gateway.as_ref().map(|g| g.stats.snapshot()).unwrap_or_default(),
        ingest_skipped,
        invalid_corrections: corrections
            .as_deref()
            .map(|c| c.iter().filter(|r| !r.valid).count())
            .unwrap_or(0),
        uncorrected_error_steps: corrections
            .as_deref()
            .map(|c| c.iter().filter(|r| r.uncorrected_error_step).count())
            .unwrap_or(0),
    };
    write_json_pretty(&config.out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reloads the metrics summary artifact, for standalone report rendering.
pub fn load_metrics_summary(config: &RunConfig) -> Result<MetricsSummary, PipelineError> {
    let path = config.out_dir.join("results/summary_metrics.json");
    if !path.exists() {
        return Err(PipelineError::MissingArtifact(path));
    }
    read_json(&path)
}

/// Reloads the analysis summary artifact when present.
pub fn load_analysis_summary(config: &RunConfig) -> Result<Option<AnalysisSummary>, PipelineError> {
    let path = config.out_dir.join("analysis/summary_analysis.json");
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(read_json(&path)?))
}
