//! Gold-guided corrected-solution generation and semantic-recall scoring.
//!
//! A correction asks the model to rewrite an incorrect student solution using
//! the gold solution as reference. The result is only trusted when its final
//! answer matches gold (the answer gate); a step-level audit additionally
//! flags corrections that left the known-bad step untouched.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{canonicalize_steps, ProblemRecord, StudentAttempt};
use crate::gateway::{Gateway, ModelRequest};
use crate::prompting::{answers_equal, parse_final_answer, PromptLibrary};

#[derive(Debug, Error)]
pub enum CorrectionError {
    #[error("gateway failure: {0}")]
    Gateway(#[from] crate::gateway::GatewayError),
    #[error("model output contains no numbered correction steps")]
    UnparsableCorrection,
    #[error("correction has no extractable final answer")]
    NoFinalAnswer,
    #[error("reference solution is empty")]
    EmptyReference,
    #[error("first error index {0} is invalid")]
    BadErrorIndex(usize),
    #[error("embedding backend failure: {0}")]
    Embedding(String),
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Where token vectors come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderMode {
    Remote,
    DeterministicHash,
}

/// A token-embedding source. Implementations must return unit-L2 vectors and
/// identical vectors for identical tokens.
pub trait TokenEmbedder: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, CorrectionError>;
}

/// Hermetic embedder: each token's vector is drawn from a ChaCha stream seeded
/// by sha256(seed || token) and L2-normalized, so equal tokens always agree
/// and results are independent of batching.
pub struct HashEmbedder {
    pub dimension: usize,
    pub seed: u64,
}

impl HashEmbedder {
    pub fn new(dimension: usize, seed: u64) -> HashEmbedder {
        assert!(dimension >= 2, "embedding dimension must be at least 2");
        HashEmbedder { dimension, seed }
    }

    fn vector(&self, token: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(token.as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(digest);
        let mut v = Vec::with_capacity(self.dimension);
        while v.len() < self.dimension {
            // Box-Muller transform over uniform draws
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            v.push(r * theta.cos());
            if v.len() < self.dimension {
                v.push(r * theta.sin());
            }
        }
        normalize(&mut v);
        v
    }
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!(norm > 0.0, "degenerate embedding vector");
    for x in v.iter_mut() {
        *x /= norm;
    }
}

impl TokenEmbedder for HashEmbedder {
    fn name(&self) -> &str {
        "deterministic_hash"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, CorrectionError> {
        Ok(tokens.iter().map(|t| self.vector(t)).collect())
    }
}

/// Transport for a remote embedding endpoint; swapped out in tests.
pub trait EmbeddingTransport: Send + Sync {
    fn embed_batch(&self, model: &str, inputs: &[String]) -> Result<Vec<Vec<f64>>, CorrectionError>;
}

/// HTTP transport speaking the common embeddings JSON shape.
pub struct HttpEmbeddingTransport {
    pub endpoint_url: String,
    pub api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpEmbeddingTransport {
    pub fn new(endpoint_url: &str, api_key_env: Option<&str>) -> Result<HttpEmbeddingTransport, CorrectionError> {
        let api_key = match api_key_env {
            None => None,
            Some(var) => Some(std::env::var(var).map_err(|_| {
                CorrectionError::Embedding(format!("missing api key environment variable {var}"))
            })?),
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(std::time::Duration::from_secs(120))
            .build()
            .map_err(|e| CorrectionError::Embedding(e.to_string()))?;
        Ok(HttpEmbeddingTransport { endpoint_url: endpoint_url.to_string(), api_key, client })
    }
}

impl EmbeddingTransport for HttpEmbeddingTransport {
    fn embed_batch(&self, model: &str, inputs: &[String]) -> Result<Vec<Vec<f64>>, CorrectionError> {
        let body = serde_json::json!({ "model": model, "input": inputs });
        let mut builder = self.client.post(&self.endpoint_url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| CorrectionError::Embedding(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| CorrectionError::Embedding(e.to_string()))?;
        if !status.is_success() {
            return Err(CorrectionError::Embedding(format!("status {status}: {text}")));
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| CorrectionError::Embedding(e.to_string()))?;
        let data = value
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| CorrectionError::Embedding("missing data array".into()))?;
        let mut out = Vec::with_capacity(data.len());
        for item in data {
            let vector = item
                .get("embedding")
                .and_then(|e| e.as_array())
                .ok_or_else(|| CorrectionError::Embedding("missing embedding".into()))?
                .iter()
                .map(|v| v.as_f64().unwrap_or(0.0))
                .collect::<Vec<f64>>();
            out.push(vector);
        }
        Ok(out)
    }
}

/// Remote embedder with per-token batching; vectors are L2-normalized on
/// receipt so scores are independent of endpoint scaling and batch splits.
pub struct RemoteEmbedder {
    pub model: String,
    pub dimension: usize,
    transport: Box<dyn EmbeddingTransport>,
    batch_size: usize,
}

impl RemoteEmbedder {
    pub fn new(model: &str, dimension: usize, transport: Box<dyn EmbeddingTransport>) -> RemoteEmbedder {
        RemoteEmbedder { model: model.to_string(), dimension, transport, batch_size: 64 }
    }
}

impl TokenEmbedder for RemoteEmbedder {
    fn name(&self) -> &str {
        "remote"
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed_tokens(&self, tokens: &[String]) -> Result<Vec<Vec<f64>>, CorrectionError> {
        let mut out = Vec::with_capacity(tokens.len());
        for chunk in tokens.chunks(self.batch_size.max(1)) {
            let vectors = self.transport.embed_batch(&self.model, chunk)?;
            if vectors.len() != chunk.len() {
                return Err(CorrectionError::Embedding(format!(
                    "asked for {} vectors, got {}",
                    chunk.len(),
                    vectors.len()
                )));
            }
            for mut v in vectors {
                if v.len() != self.dimension {
                    return Err(CorrectionError::DimensionMismatch {
                        expected: self.dimension,
                        got: v.len(),
                    });
                }
                normalize(&mut v);
                out.push(v);
            }
        }
        Ok(out)
    }
}

/// Lowercases and splits on whitespace/punctuation; numbers stay whole
/// ("1.5" is one token), letter runs are tokens, everything else separates.
pub fn tokenize(text: &str) -> Vec<String> {
    let chars: Vec<char> = text.chars().collect();
    let mut tokens = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_ascii_digit() {
            let mut token = String::new();
            while i < chars.len()
                && (chars[i].is_ascii_digit()
                    || (chars[i] == '.'
                        && i + 1 < chars.len()
                        && chars[i + 1].is_ascii_digit()
                        && !token.contains('.')))
            {
                token.push(chars[i]);
                i += 1;
            }
            tokens.push(token);
        } else if c.is_alphabetic() {
            let mut token = String::new();
            while i < chars.len() && chars[i].is_alphabetic() {
                token.extend(chars[i].to_lowercase());
                i += 1;
            }
            tokens.push(token);
        } else {
            i += 1;
        }
    }
    tokens
}

/// Which side the recall average runs over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecallOrientation {
    /// Mean over student-prefix tokens of max cosine against reference tokens.
    StudentPrefix,
    /// Mean over reference tokens of max cosine against student-prefix tokens.
    ReferenceSide,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RecallScore {
    pub value: f64,
    /// True when the error is at step 1: no prefix exists and 0 is returned by convention.
    pub empty_prefix: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    if a == b {
        // self-similarity is 1 by definition; sqrt roundoff must not erode it
        return 1.0;
    }
    dot / (na * nb)
}

/// Token-level semantic recall of the student's pre-error prefix against a
/// reference solution, in [0, 1].
///
/// The prefix is steps 1..first_error_index (the erroneous step excluded).
/// Each side is tokenized, tokens embedded once, and the mean of per-token
/// maximum cosine similarities is clamped to [0, 1].
pub fn semantic_recall(
    reference_steps: &[String],
    student_steps: &[String],
    first_error_index: usize,
    embedder: &dyn TokenEmbedder,
    orientation: RecallOrientation,
) -> Result<RecallScore, CorrectionError> {
    if reference_steps.is_empty() {
        return Err(CorrectionError::EmptyReference);
    }
    if first_error_index < 1 || first_error_index > student_steps.len() {
        return Err(CorrectionError::BadErrorIndex(first_error_index));
    }
    let prefix_text = student_steps[..first_error_index - 1].join(" ");
    let prefix_tokens = tokenize(&prefix_text);
    if prefix_tokens.is_empty() {
        return Ok(RecallScore { value: 0.0, empty_prefix: true });
    }
    let reference_tokens = tokenize(&reference_steps.join(" "));
    if reference_tokens.is_empty() {
        return Err(CorrectionError::EmptyReference);
    }
    // embed each distinct token once; scores are independent of batching
    let mut distinct: Vec<String> = prefix_tokens
        .iter()
        .chain(reference_tokens.iter())
        .cloned()
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    distinct.sort();
    let vectors = embedder.embed_tokens(&distinct)?;
    let lookup: std::collections::BTreeMap<&str, &Vec<f64>> =
        distinct.iter().map(String::as_str).zip(vectors.iter()).collect();
    let (over, against) = match orientation {
        RecallOrientation::StudentPrefix => (&prefix_tokens, &reference_tokens),
        RecallOrientation::ReferenceSide => (&reference_tokens, &prefix_tokens),
    };
    let mut total = 0.0;
    for token in over {
        let v = lookup[token.as_str()];
        let best = against
            .iter()
            .map(|other| cosine(v, lookup[other.as_str()]))
            .fold(f64::NEG_INFINITY, f64::max);
        total += best;
    }
    let value = (total / over.len() as f64).clamp(0.0, 1.0);
    Ok(RecallScore { value, empty_prefix: false })
}

/// A parsed and gated corrected solution.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrectionResult {
    pub steps: Vec<String>,
    pub final_answer: String,
    /// The answer gate: only answer-matching corrections may serve as references.
    pub answer_matches_gold: bool,
    /// |corrected steps| / |student steps|.
    pub step_ratio: f64,
    /// Step-level audit: the step at the annotated error index is textually
    /// unchanged even though the final answer matches gold.
    pub uncorrected_error_step: bool,
    pub raw_output: String,
}

fn squash_ws(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Lines that carry an explicit step number; prose around them is discarded.
fn numbered_lines(text: &str) -> Vec<String> {
    let re = regex::Regex::new(r"^\s*(?i:step\s*)?\d{1,3}\s*[:.)]\s+").expect("static regex");
    let keyword = regex::Regex::new(r"^\s*(?i:step)\s*\d{1,3}\b").expect("static regex");
    text.lines()
        .filter(|line| re.is_match(line) || keyword.is_match(line))
        .map(str::to_string)
        .collect()
}

/// Asks the model for a gold-guided rewrite of the student's solution and
/// applies the answer gate plus the uncorrected-step audit.
pub fn generate_correction(
    problem: &ProblemRecord,
    attempt: &StudentAttempt,
    gateway: &Gateway,
    library: &PromptLibrary,
    model_id: &str,
) -> Result<CorrectionResult, CorrectionError> {
    let messages = library.build_correction_prompt(problem, attempt);
    let request = ModelRequest::new(model_id, messages);
    let response = gateway.complete(&request)?;
    parse_correction(&response.text, problem, attempt)
}

/// Pure parsing/gating half of correction generation, testable without a gateway.
pub fn parse_correction(
    raw_output: &str,
    problem: &ProblemRecord,
    attempt: &StudentAttempt,
) -> Result<CorrectionResult, CorrectionError> {
    let lines = numbered_lines(raw_output);
    if lines.is_empty() {
        return Err(CorrectionError::UnparsableCorrection);
    }
    let steps = canonicalize_steps(&lines).map_err(|_| CorrectionError::UnparsableCorrection)?;
    let final_answer =
        parse_final_answer(raw_output).map_err(|_| CorrectionError::NoFinalAnswer)?;
    let answer_matches_gold = answers_equal(&final_answer, &problem.gold_final_answer);
    let step_ratio = steps.len() as f64 / attempt.steps.len() as f64;
    let error_idx = attempt.first_error_index;
    let uncorrected_error_step = answer_matches_gold
        && error_idx <= steps.len()
        && squash_ws(&steps[error_idx - 1]) == squash_ws(&attempt.steps[error_idx - 1]);
    Ok(CorrectionResult {
        steps,
        final_answer,
        answer_matches_gold,
        step_ratio,
        uncorrected_error_step,
        raw_output: raw_output.to_string(),
    })
}
