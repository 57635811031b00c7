//! Chat-completion gateway: backends, content-addressed response cache,
//! retries, and bounded parallel execution.
//!
//! Every request is keyed by a SHA-256 digest of its canonical JSON form, so
//! identical requests are answered from the on-disk cache regardless of which
//! backend produced them first.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Greedy-decoding sampling configuration, used as request defaults.
pub const DEFAULT_TEMPERATURE: f64 = 0.0;
pub const DEFAULT_TOP_P: f64 = 0.95;
pub const DEFAULT_MAX_TOKENS: u32 = 2048;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("mock backend has no response for request {key} (prompt starts {preview:?})")]
    MockMiss { key: String, preview: String },
    #[error("mock script {path}: {message}")]
    BadScript { path: String, message: String },
    #[error("backend http error: {0}")]
    Http(String),
    #[error("backend returned malformed payload: {0}")]
    BadPayload(String),
    #[error("cache-only backend has no entry for request {0}")]
    ColdCache(String),
    #[error("cache io error on {path}: {message}")]
    CacheIo { path: String, message: String },
    #[error("missing api key environment variable {0}")]
    MissingApiKey(String),
}

impl GatewayError {
    /// Transient failures worth retrying; scripted and cache misses are not.
    pub fn is_retryable(&self) -> bool {
        matches!(self, GatewayError::Http(_))
    }
}

/// One chat message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: String,
    pub content: String,
}

impl Message {
    pub fn user(content: impl Into<String>) -> Message {
        Message { role: "user".into(), content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Message {
        Message { role: "assistant".into(), content: content.into() }
    }
}

/// A fully specified chat-completion request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
}

impl ModelRequest {
    /// Request with the default sampling configuration.
    pub fn new(model_id: impl Into<String>, messages: Vec<Message>) -> ModelRequest {
        ModelRequest {
            model_id: model_id.into(),
            messages,
            temperature: DEFAULT_TEMPERATURE,
            top_p: DEFAULT_TOP_P,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.model_id.trim().is_empty() {
            return Err(GatewayError::InvalidRequest("model_id is empty".into()));
        }
        if self.messages.is_empty() || self.messages.iter().any(|m| m.content.is_empty()) {
            return Err(GatewayError::InvalidRequest("messages must be non-empty".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest("temperature must be >= 0".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(GatewayError::InvalidRequest("top_p must be in (0, 1]".into()));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Concatenated message contents; the text mock rules match against.
    pub fn prompt_text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }
}

/// Canonical JSON for hashing: object keys sorted lexicographically (serde_json
/// maps are BTree-backed), no insignificant whitespace, shortest-round-trip
/// number formatting.
pub fn canonical_request_json(request: &ModelRequest) -> String {
    let value = serde_json::json!({
        "model_id": request.model_id,
        "messages": request.messages,
        "temperature": request.temperature,
        "top_p": request.top_p,
        "max_tokens": request.max_tokens,
    });
    serde_json::to_string(&value).expect("serializable request")
}

/// SHA-256 hex digest of the canonical request JSON; the cache file name.
pub fn cache_key(request: &ModelRequest) -> String {
    hex::encode(Sha256::digest(canonical_request_json(request).as_bytes()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BackendKind {
    Live,
    Mock,
    Cache,
}

/// A completed request with its provenance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelResponse {
    pub text: String,
    pub backend: BackendKind,
    pub latency_ms: u64,
}

pub trait ChatBackend: Send + Sync {
    fn kind(&self) -> BackendKind;
    fn complete(&self, request: &ModelRequest) -> Result<String, GatewayError>;
}

#[derive(Debug, Deserialize)]
struct MockRuleWire {
    #[serde(rename = "match")]
    matcher: MockMatcher,
    response: String,
}

#[derive(Debug, Deserialize)]
struct MockMatcher {
    hash: Option<String>,
    prompt_regex: Option<String>,
}

/// Scripted backend for hermetic runs: exact request-hash matches first, then
/// prompt regexes in file order, then an explicit miss error.
pub struct MockBackend {
    by_hash: HashMap<String, String>,
    rules: Vec<(regex::Regex, String)>,
}

impl MockBackend {
    pub fn from_script(path: &Path) -> Result<MockBackend, GatewayError> {
        let text = fs::read_to_string(path).map_err(|e| GatewayError::BadScript {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let mut by_hash = HashMap::new();
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let wire: MockRuleWire =
                serde_json::from_str(line).map_err(|e| GatewayError::BadScript {
                    path: path.display().to_string(),
                    message: format!("line {}: {e}", i + 1),
                })?;
            match (wire.matcher.hash, wire.matcher.prompt_regex) {
                (Some(hash), None) => {
                    by_hash.insert(hash, wire.response);
                }
                (None, Some(pattern)) => {
                    let re = regex::Regex::new(&pattern).map_err(|e| GatewayError::BadScript {
                        path: path.display().to_string(),
                        message: format!("line {}: bad regex: {e}", i + 1),
                    })?;
                    rules.push((re, wire.response));
                }
                _ => {
                    return Err(GatewayError::BadScript {
                        path: path.display().to_string(),
                        message: format!("line {}: match needs exactly one of hash/prompt_regex", i + 1),
                    });
                }
            }
        }
        Ok(MockBackend { by_hash, rules })
    }
}

impl ChatBackend for MockBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Mock
    }

    fn complete(&self, request: &ModelRequest) -> Result<String, GatewayError> {
        let key = cache_key(request);
        if let Some(response) = self.by_hash.get(&key) {
            return Ok(response.clone());
        }
        let prompt = request.prompt_text();
        for (re, response) in &self.rules {
            if re.is_match(&prompt) {
                return Ok(response.clone());
            }
        }
        Err(GatewayError::MockMiss {
            key,
            preview: prompt.chars().take(80).collect(),
        })
    }
}

/// Live HTTP backend speaking the common chat-completions JSON shape.
pub struct LiveBackend {
    endpoint_url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn new(endpoint_url: &str, api_key_env: Option<&str>) -> Result<LiveBackend, GatewayError> {
        let api_key = match api_key_env {
            None => None,
            Some(var) => Some(
                std::env::var(var).map_err(|_| GatewayError::MissingApiKey(var.to_string()))?,
            ),
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| GatewayError::Http(e.to_string()))?;
        Ok(LiveBackend { endpoint_url: endpoint_url.to_string(), api_key, client })
    }
}

impl ChatBackend for LiveBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Live
    }

    fn complete(&self, request: &ModelRequest) -> Result<String, GatewayError> {
        let body = serde_json::json!({
            "model": request.model_id,
            "messages": request.messages,
            "temperature": request.temperature,
            "top_p": request.top_p,
            "max_tokens": request.max_tokens,
        });
        let mut builder = self.client.post(&self.endpoint_url).json(&body);
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = builder.send().map_err(|e| GatewayError::Http(e.to_string()))?;
        let status = response.status();
        let text = response.text().map_err(|e| GatewayError::Http(e.to_string()))?;
        if !status.is_success() {
            return Err(GatewayError::Http(format!("status {status}: {text}")));
        }
        let value: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| GatewayError::BadPayload(e.to_string()))?;
        value
            .get("choices")
            .and_then(|c| c.get(0))
            .and_then(|c| c.get("message"))
            .and_then(|m| m.get("content"))
            .and_then(|t| t.as_str())
            .map(str::to_string)
            .ok_or_else(|| GatewayError::BadPayload("missing choices[0].message.content".into()))
    }
}

/// Backend for replaying fully cached runs; any cache miss is an error.
pub struct CacheOnlyBackend;

impl ChatBackend for CacheOnlyBackend {
    fn kind(&self) -> BackendKind {
        BackendKind::Cache
    }

    fn complete(&self, request: &ModelRequest) -> Result<String, GatewayError> {
        Err(GatewayError::ColdCache(cache_key(request)))
    }
}

/// Retry schedule for transient backend failures.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub backoff_secs: Vec<u64>,
}

impl Default for RetryPolicy {
    fn default() -> RetryPolicy {
        RetryPolicy { max_retries: 3, backoff_secs: vec![1, 4, 16] }
    }
}

impl RetryPolicy {
    fn backoff(&self, attempt: u32) -> Duration {
        let idx = (attempt as usize).min(self.backoff_secs.len().saturating_sub(1));
        Duration::from_secs(self.backoff_secs.get(idx).copied().unwrap_or(1))
    }
}

/// Counters for the run manifest.
#[derive(Debug, Default)]
pub struct GatewayStats {
    pub cache_hits: AtomicU64,
    pub cache_misses: AtomicU64,
    pub live_calls: AtomicU64,
    pub mock_calls: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsSnapshot {
    pub cache_hits: u64,
    pub cache_misses: u64,
    pub live_calls: u64,
    pub mock_calls: u64,
}

impl GatewayStats {
    pub fn snapshot(&self) -> StatsSnapshot {
        StatsSnapshot {
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            cache_misses: self.cache_misses.load(Ordering::Relaxed),
            live_calls: self.live_calls.load(Ordering::Relaxed),
            mock_calls: self.mock_calls.load(Ordering::Relaxed),
        }
    }
}

/// On-disk cache entry, one JSON file per request hash.
#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    request: serde_json::Value,
    response_text: String,
    timestamp: u64,
}

/// Gateway: backend + cache + retry policy + bounded parallelism.
pub struct Gateway {
    backend: Box<dyn ChatBackend>,
    cache_dir: Option<PathBuf>,
    retry: RetryPolicy,
    parallelism: usize,
    pub stats: GatewayStats,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl Gateway {
    pub fn new(
        backend: Box<dyn ChatBackend>,
        cache_dir: Option<PathBuf>,
        retry: RetryPolicy,
        parallelism: usize,
    ) -> Result<Gateway, GatewayError> {
        if let Some(dir) = &cache_dir {
            fs::create_dir_all(dir).map_err(|e| GatewayError::CacheIo {
                path: dir.display().to_string(),
                message: e.to_string(),
            })?;
        }
        Ok(Gateway {
            backend,
            cache_dir,
            retry,
            parallelism: parallelism.max(1),
            stats: GatewayStats::default(),
            key_locks: Mutex::new(HashMap::new()),
        })
    }

    fn cache_path(&self, key: &str) -> Option<PathBuf> {
        self.cache_dir.as_ref().map(|d| d.join(format!("{key}.json")))
    }

    fn read_cache(&self, key: &str) -> Option<String> {
        let path = self.cache_path(key)?;
        let bytes = fs::read(&path).ok()?;
        // An unreadable entry is treated as a miss; atomic writes mean this
        // only happens if the file was tampered with.
        let entry: CacheEntry = serde_json::from_slice(&bytes).ok()?;
        Some(entry.response_text)
    }

    /// Write-temp-then-rename so a killed run never leaves a readable
    /// truncated entry; a per-key lock serializes writers of the same key.
    fn write_cache(&self, key: &str, request: &ModelRequest, text: &str) -> Result<(), GatewayError> {
        let Some(path) = self.cache_path(key) else { return Ok(()) };
        let lock = {
            let mut locks = self.key_locks.lock().expect("lock map poisoned");
            locks.entry(key.to_string()).or_default().clone()
        };
        let _guard = lock.lock().expect("key lock poisoned");
        let entry = CacheEntry {
            request: serde_json::from_str(&canonical_request_json(request)).expect("canonical json"),
            response_text: text.to_string(),
            timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        };
        let payload = serde_json::to_vec(&entry).expect("serializable entry");
        let tmp = path.with_extension(format!("tmp-{}", std::process::id()));
        let io_err = |e: std::io::Error| GatewayError::CacheIo {
            path: path.display().to_string(),
            message: e.to_string(),
        };
        let mut file = fs::File::create(&tmp).map_err(io_err)?;
        file.write_all(&payload).map_err(io_err)?;
        file.sync_all().map_err(io_err)?;
        drop(file);
        fs::rename(&tmp, &path).map_err(io_err)?;
        Ok(())
    }

    fn record_backend_call(&self) {
        match self.backend.kind() {
            BackendKind::Live => self.stats.live_calls.fetch_add(1, Ordering::Relaxed),
            BackendKind::Mock => self.stats.mock_calls.fetch_add(1, Ordering::Relaxed),
            BackendKind::Cache => 0,
        };
    }

    /// Completes one request, consulting the cache first.
    pub fn complete(&self, request: &ModelRequest) -> Result<ModelResponse, GatewayError> {
        request.validate()?;
        let key = cache_key(request);
        if let Some(text) = self.read_cache(&key) {
            self.stats.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(ModelResponse { text, backend: BackendKind::Cache, latency_ms: 0 });
        }
        self.stats.cache_misses.fetch_add(1, Ordering::Relaxed);
        let started = Instant::now();
        let mut attempt = 0;
        let text = loop {
            self.record_backend_call();
            match self.backend.complete(request) {
                Ok(text) => break text,
                Err(err) if err.is_retryable() && attempt < self.retry.max_retries => {
                    std::thread::sleep(self.retry.backoff(attempt));
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        };
        self.write_cache(&key, request, &text)?;
        Ok(ModelResponse {
            text,
            backend: self.backend.kind(),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }

    /// Completes a batch with at most `parallelism` requests in flight.
    /// Results come back in input order regardless of scheduling.
    pub fn complete_many(
        &self,
        requests: &[ModelRequest],
    ) -> Vec<Result<ModelResponse, GatewayError>> {
        if requests.is_empty() {
            return Vec::new();
        }
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results: Mutex<Vec<Option<Result<ModelResponse, GatewayError>>>> =
            Mutex::new((0..requests.len()).map(|_| None).collect());
        let workers = self.parallelism.min(requests.len());
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= requests.len() {
                        break;
                    }
                    let result = self.complete(&requests[i]);
                    results.lock().expect("results poisoned")[i] = Some(result);
                });
            }
        });
        results
            .into_inner()
            .expect("results poisoned")
            .into_iter()
            .map(|r| r.expect("worker filled every slot"))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn request(text: &str) -> ModelRequest {
        ModelRequest::new("test-model", vec![Message::user(text)])
    }

    fn script(dir: &Path, lines: &[&str]) -> PathBuf {
        let path = dir.join("mock.jsonl");
        let mut file = fs::File::create(&path).unwrap();
        for line in lines {
            writeln!(file, "{line}").unwrap();
        }
        path
    }

    #[test]
    fn request_defaults_use_greedy_decoding() {
        let req = request("hello");
        assert_eq!(req.temperature, 0.0);
        assert_eq!(req.top_p, 0.95);
        assert_eq!(req.max_tokens, 2048);
    }

    #[test]
    fn canonical_json_sorts_keys_and_drops_whitespace() {
        let req = request("hi");
        let canonical = canonical_request_json(&req);
        let expected = r#"{"max_tokens":2048,"messages":[{"content":"hi","role":"user"}],"model_id":"test-model","temperature":0.0,"top_p":0.95}"#;
        assert_eq!(canonical, expected);
    }

    #[test]
    fn cache_key_matches_external_sha256_of_canonical_form() {
        // sha256 of the canonical string above, computed with an independent tool.
        let req = request("hi");
        assert_eq!(
            cache_key(&req),
            "3e36433bb36c38e08bf4b33a0203805dc82ad0acb372fd8e54a6561bbc54319c"
        );
    }

    #[test]
    fn identical_requests_share_keys_and_distinct_requests_do_not() {
        let a = request("same");
        let b = request("same");
        let c = request("different");
        assert_eq!(cache_key(&a), cache_key(&b));
        assert_ne!(cache_key(&a), cache_key(&c));
        let mut hotter = request("same");
        hotter.temperature = 0.7;
        assert_ne!(cache_key(&a), cache_key(&hotter));
    }

    #[test]
    fn validate_rejects_bad_sampling_parameters() {
        let mut req = request("x");
        req.top_p = 0.0;
        assert!(req.validate().is_err());
        let mut req = request("x");
        req.temperature = -1.0;
        assert!(req.validate().is_err());
        let mut req = request("x");
        req.max_tokens = 0;
        assert!(req.validate().is_err());
        let req = ModelRequest::new("m", vec![]);
        assert!(req.validate().is_err());
    }

    #[test]
    fn mock_resolves_hash_then_regex_then_misses() {
        let dir = tempfile::tempdir().unwrap();
        let hash = cache_key(&request("exact"));
        let lines = [
            format!(r#"{{"match":{{"hash":"{hash}"}},"response":"by hash"}}"#),
            r#"{"match":{"prompt_regex":"exa.t"},"response":"by regex"}"#.to_string(),
        ];
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let path = script(dir.path(), &refs);
        let mock = MockBackend::from_script(&path).unwrap();
        // hash rule wins even though the regex also matches
        assert_eq!(mock.complete(&request("exact")).unwrap(), "by hash");
        assert_eq!(mock.complete(&request("exalt")).unwrap(), "by regex");
        let miss = mock.complete(&request("nothing here")).unwrap_err();
        assert!(matches!(miss, GatewayError::MockMiss { .. }));
        assert!(!miss.is_retryable());
    }

    #[test]
    fn cache_round_trip_returns_bytes_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let hash = cache_key(&request("q"));
        let line = format!(r#"{{"match":{{"hash":"{hash}"}},"response":"first answer\nwith newline"}}"#);
        let path = script(dir.path(), &[line.as_str()]);
        let gateway = Gateway::new(
            Box::new(MockBackend::from_script(&path).unwrap()),
            Some(dir.path().join("cache")),
            RetryPolicy::default(),
            2,
        )
        .unwrap();
        let cold = gateway.complete(&request("q")).unwrap();
        assert_eq!(cold.backend, BackendKind::Mock);
        let warm = gateway.complete(&request("q")).unwrap();
        assert_eq!(warm.backend, BackendKind::Cache);
        assert_eq!(warm.text, cold.text);
        let snap = gateway.stats.snapshot();
        assert_eq!(snap.cache_hits, 1);
        assert_eq!(snap.cache_misses, 1);
        assert_eq!(snap.mock_calls, 1);
        assert_eq!(snap.live_calls, 0);
    }

    #[test]
    fn cache_entry_file_holds_request_response_and_timestamp() {
        let dir = tempfile::tempdir().unwrap();
        let req = request("payload");
        let hash = cache_key(&req);
        let line = format!(r#"{{"match":{{"hash":"{hash}"}},"response":"ok"}}"#);
        let path = script(dir.path(), &[line.as_str()]);
        let cache = dir.path().join("cache");
        let gateway = Gateway::new(
            Box::new(MockBackend::from_script(&path).unwrap()),
            Some(cache.clone()),
            RetryPolicy::default(),
            1,
        )
        .unwrap();
        gateway.complete(&req).unwrap();
        let entry_path = cache.join(format!("{hash}.json"));
        let value: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&entry_path).unwrap()).unwrap();
        assert_eq!(value["response_text"], "ok");
        assert!(value["timestamp"].is_u64());
        assert_eq!(value["request"]["model_id"], "test-model");
        // no stray temp files left behind
        let stray: Vec<_> = fs::read_dir(&cache)
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().path().extension().map(|x| x != "json").unwrap_or(true)
            })
            .collect();
        assert!(stray.is_empty());
    }

    #[test]
    fn cache_only_backend_errors_on_cold_cache() {
        let dir = tempfile::tempdir().unwrap();
        let gateway = Gateway::new(
            Box::new(CacheOnlyBackend),
            Some(dir.path().join("cache")),
            RetryPolicy::default(),
            1,
        )
        .unwrap();
        let err = gateway.complete(&request("never seen")).unwrap_err();
        assert!(matches!(err, GatewayError::ColdCache(_)));
    }

    #[test]
    fn complete_many_preserves_input_order() {
        let dir = tempfile::tempdir().unwrap();
        let lines: Vec<String> = (0..20)
            .map(|i| {
                let hash = cache_key(&request(&format!("prompt {i}")));
                format!(r#"{{"match":{{"hash":"{hash}"}},"response":"answer {i}"}}"#)
            })
            .collect();
        let refs: Vec<&str> = lines.iter().map(String::as_str).collect();
        let path = script(dir.path(), &refs);
        let gateway = Gateway::new(
            Box::new(MockBackend::from_script(&path).unwrap()),
            None,
            RetryPolicy::default(),
            4,
        )
        .unwrap();
        let requests: Vec<ModelRequest> = (0..20).map(|i| request(&format!("prompt {i}"))).collect();
        let results = gateway.complete_many(&requests);
        for (i, result) in results.iter().enumerate() {
            assert_eq!(result.as_ref().unwrap().text, format!("answer {i}"));
        }
    }

    #[test]
    fn default_retry_policy_is_three_attempts_with_documented_backoff() {
        let policy = RetryPolicy::default();
        assert_eq!(policy.max_retries, 3);
        assert_eq!(policy.backoff_secs, vec![1, 4, 16]);
        assert_eq!(policy.backoff(0), Duration::from_secs(1));
        assert_eq!(policy.backoff(2), Duration::from_secs(16));
        assert_eq!(policy.backoff(9), Duration::from_secs(16));
    }
}
