//! Wire clients for generation and embedding services, plus deterministic
//! twins for tests and offline runs.
//!
//! This is the only module that opens network connections. Everything
//! speaks the chat-completions JSON format (`POST {endpoint}/v1/chat/completions`
//! and `POST {endpoint}/v1/embeddings`).

use std::collections::{HashMap, VecDeque};
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const API_KEY_ENV: &str = "ELICIT_API_KEY";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("missing or rejected credentials: {0}")]
    Auth(String),
    #[error("request timed out after {0:?}")]
    Timeout(Duration),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("server returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("invalid request: {0}")]
    Precondition(String),
    #[error("scripted backend exhausted after {0} completions")]
    ScriptExhausted(usize),
    #[error("no recorded response for fingerprint {0}")]
    ReplayMiss(String),
    #[error("replay log: {0}")]
    ReplayLog(String),
}

impl BackendError {
    fn retryable(&self) -> bool {
        match self {
            BackendError::Transport(_) | BackendError::Timeout(_) => true,
            BackendError::Status { status, .. } => *status >= 500 || *status == 429,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into() }
    }
}

/// Default sampling temperature for free-text generation (questions and
/// patient replies).
pub const GENERATION_TEMPERATURE: f64 = 0.7;
/// Temperature for structured outputs (detection, reasoning, planning).
pub const STRUCTURED_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model: String,
}

impl GenerationRequest {
    pub fn new(messages: Vec<Message>, temperature: f64) -> Self {
        Self { messages, temperature, max_tokens: 512, model: String::new() }
    }

    fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::Precondition("request has no messages".into()));
        }
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::Precondition(format!("temperature {} < 0", self.temperature)));
        }
        Ok(())
    }

    /// Stable content hash of the request, used as the replay key.
    pub fn fingerprint(&self) -> String {
        fingerprint("chat", &serde_json::to_value(self).expect("request serialises"))
    }
}

fn fingerprint(kind: &str, value: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(kind.as_bytes());
    h.update([0u8]);
    h.update(value.to_string().as_bytes());
    h.finalize().iter().take(16).map(|b| format!("{b:02x}")).collect()
}

/// Text generation.
pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError>;
}

/// Batch text embedding. Vectors come back unit-normalised, one per input,
/// in input order.
pub trait EmbedBackend: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for Arc<T> {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

impl<T: EmbedBackend + ?Sized> EmbedBackend for Arc<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        (**self).embed(texts)
    }
}

pub fn normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

// ---------------------------------------------------------------------------
// HTTP client

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    pub embed_model: String,
    pub timeout_s: u64,
    pub max_concurrency: usize,
    pub max_retries: u32,
    pub backoff_base_ms: u64,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            endpoint: "https://api.openai.com".into(),
            model: "gpt-4o-mini".into(),
            embed_model: "all-MiniLM-L6-v2".into(),
            timeout_s: 60,
            max_concurrency: 4,
            max_retries: 2,
            backoff_base_ms: 500,
        }
    }
}

/// Counting semaphore capping in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(n: usize) -> Self {
        Self { free: Mutex::new(n.max(1)), cv: Condvar::new() }
    }

    fn acquire(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().unwrap();
        while *free == 0 {
            free = self.cv.wait(free).unwrap();
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap() += 1;
        self.0.cv.notify_one();
    }
}

pub struct HttpClient {
    cfg: HttpConfig,
    api_key: Option<String>,
    agent: ureq::Agent,
    gate: Gate,
    retries: AtomicU64,
    calls: AtomicU64,
}

#[derive(Deserialize)]
struct ChatResponse {
    choices: Vec<ChatChoice>,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatMessageBody,
}

#[derive(Deserialize)]
struct ChatMessageBody {
    content: Option<String>,
}

#[derive(Deserialize)]
struct EmbeddingResponse {
    data: Vec<EmbeddingItem>,
}

#[derive(Deserialize)]
struct EmbeddingItem {
    #[serde(default)]
    index: Option<usize>,
    embedding: Vec<f32>,
}

impl HttpClient {
    /// Reads the API key from `ELICIT_API_KEY`.
    pub fn from_env(cfg: HttpConfig) -> Self {
        let key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.trim().is_empty());
        Self::new(cfg, key)
    }

    pub fn new(cfg: HttpConfig, api_key: Option<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_s.max(1))))
            .http_status_as_error(false)
            .build()
            .into();
        let gate = Gate::new(cfg.max_concurrency);
        Self { cfg, api_key, agent, gate, retries: AtomicU64::new(0), calls: AtomicU64::new(0) }
    }

    /// Total retries performed so far.
    pub fn retry_count(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    fn url(&self, path: &str) -> String {
        format!("{}{}", self.cfg.endpoint.trim_end_matches('/'), path)
    }

    fn post_once(&self, url: &str, body: &serde_json::Value) -> Result<String, BackendError> {
        let key = self.api_key.as_deref().ok_or_else(|| BackendError::Auth(format!("{API_KEY_ENV} is not set")))?;
        let _permit = self.gate.acquire();
        self.calls.fetch_add(1, Ordering::Relaxed);
        let resp = self.agent.post(url).header("Authorization", format!("Bearer {key}")).send_json(body).map_err(
            |e| match e {
                ureq::Error::Timeout(_) => BackendError::Timeout(Duration::from_secs(self.cfg.timeout_s)),
                other => BackendError::Transport(other.to_string()),
            },
        )?;
        let status = resp.status().as_u16();
        let text = resp.into_body().read_to_string().map_err(|e| BackendError::Transport(e.to_string()))?;
        match status {
            200..=299 => Ok(text),
            401 | 403 => Err(BackendError::Auth(format!("HTTP {status}"))),
            _ => Err(BackendError::Status { status, body: truncate(&text, 200) }),
        }
    }

    fn post(&self, path: &str, body: &serde_json::Value) -> Result<String, BackendError> {
        let url = self.url(path);
        let mut attempt = 0;
        loop {
            match self.post_once(&url, body) {
                Ok(text) => return Ok(text),
                Err(e) if e.retryable() && attempt < self.cfg.max_retries => {
                    let wait = self.cfg.backoff_base_ms.saturating_mul(1 << attempt);
                    log::warn!("{url}: {e}; retry {} in {wait} ms", attempt + 1);
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    std::thread::sleep(Duration::from_millis(wait));
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }
}

fn truncate(s: &str, n: usize) -> String {
    if s.len() <= n {
        s.to_string()
    } else {
        let mut end = n;
        while !s.is_char_boundary(end) {
            end -= 1;
        }
        format!("{}...", &s[..end])
    }
}

impl ChatBackend for HttpClient {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        request.validate()?;
        let model = if request.model.is_empty() { &self.cfg.model } else { &request.model };
        let body = serde_json::json!({
            "model": model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        let text = self.post("/v1/chat/completions", &body)?;
        let parsed: ChatResponse = serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        parsed
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| BackendError::Malformed("no choices[0].message.content".into()))
    }
}

impl EmbedBackend for HttpClient {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        if texts.iter().any(|t| t.trim().is_empty()) {
            return Err(BackendError::Precondition("cannot embed empty text".into()));
        }
        let body = serde_json::json!({ "model": self.cfg.embed_model, "input": texts });
        let text = self.post("/v1/embeddings", &body)?;
        let parsed: EmbeddingResponse =
            serde_json::from_str(&text).map_err(|e| BackendError::Malformed(e.to_string()))?;
        if parsed.data.len() != texts.len() {
            return Err(BackendError::Malformed(format!(
                "expected {} embeddings, got {}",
                texts.len(),
                parsed.data.len()
            )));
        }
        let mut items = parsed.data;
        if items.iter().all(|i| i.index.is_some()) {
            items.sort_by_key(|i| i.index);
        }
        Ok(items
            .into_iter()
            .map(|i| {
                let mut v = i.embedding;
                normalize(&mut v);
                v
            })
            .collect())
    }
}

// ---------------------------------------------------------------------------
// Scripted twin

enum Script {
    Queue(VecDeque<String>),
    Keyed(HashMap<String, String>),
}

/// Serves canned completions, either in order or keyed by request
/// fingerprint. Running out is an error.
pub struct ScriptedBackend {
    script: Mutex<Script>,
    served: AtomicU64,
    requests: Mutex<Vec<GenerationRequest>>,
}

impl ScriptedBackend {
    pub fn queue<I, S>(items: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self::with(Script::Queue(items.into_iter().map(Into::into).collect()))
    }

    pub fn keyed(map: HashMap<String, String>) -> Self {
        Self::with(Script::Keyed(map))
    }

    fn with(script: Script) -> Self {
        Self { script: Mutex::new(script), served: AtomicU64::new(0), requests: Mutex::new(Vec::new()) }
    }

    /// Every request received so far, in arrival order.
    pub fn requests(&self) -> Vec<GenerationRequest> {
        self.requests.lock().unwrap().clone()
    }
}

impl ChatBackend for ScriptedBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        request.validate()?;
        self.requests.lock().unwrap().push(request.clone());
        let mut script = self.script.lock().unwrap();
        let out = match &mut *script {
            Script::Queue(q) => q.pop_front(),
            Script::Keyed(m) => m.get(&request.fingerprint()).cloned(),
        };
        match out {
            Some(s) => {
                self.served.fetch_add(1, Ordering::Relaxed);
                Ok(s)
            }
            None => Err(BackendError::ScriptExhausted(self.served.load(Ordering::Relaxed) as usize)),
        }
    }
}

/// Each scripted entry is a JSON array of vectors for one batch; keyed
/// scripts use the embed fingerprint of the input list.
impl EmbedBackend for ScriptedBackend {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let mut script = self.script.lock().unwrap();
        let out = match &mut *script {
            Script::Queue(q) => q.pop_front(),
            Script::Keyed(m) => m.get(&fingerprint("embed", &serde_json::json!({ "input": texts }))).cloned(),
        };
        let raw = out.ok_or_else(|| BackendError::ScriptExhausted(self.served.load(Ordering::Relaxed) as usize))?;
        self.served.fetch_add(1, Ordering::Relaxed);
        let mut vecs: Vec<Vec<f32>> =
            serde_json::from_str(&raw).map_err(|e| BackendError::Malformed(format!("scripted embedding: {e}")))?;
        vecs.iter_mut().for_each(|v| normalize(v));
        Ok(vecs)
    }
}

// ---------------------------------------------------------------------------
// Record / replay

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub fingerprint: String,
    pub request: serde_json::Value,
    pub response: serde_json::Value,
}

/// Wraps a live backend and appends every exchange to a JSON-lines file.
pub struct Recorder<B> {
    inner: B,
    out: Mutex<File>,
}

impl<B> Recorder<B> {
    pub fn create(inner: B, path: &Path) -> std::io::Result<Self> {
        let out = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { inner, out: Mutex::new(out) })
    }

    fn write(&self, entry: &ReplayEntry) {
        let line = serde_json::to_string(entry).expect("entry serialises");
        let mut f = self.out.lock().unwrap();
        if let Err(e) = writeln!(f, "{line}") {
            log::error!("replay log write failed: {e}");
        }
    }
}

impl<B: ChatBackend> ChatBackend for Recorder<B> {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        let text = self.inner.complete(request)?;
        self.write(&ReplayEntry {
            fingerprint: request.fingerprint(),
            request: serde_json::to_value(request).unwrap(),
            response: serde_json::Value::String(text.clone()),
        });
        Ok(text)
    }
}

impl<B: EmbedBackend> EmbedBackend for Recorder<B> {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        let vecs = self.inner.embed(texts)?;
        let req = serde_json::json!({ "input": texts });
        self.write(&ReplayEntry {
            fingerprint: fingerprint("embed", &req),
            request: req,
            response: serde_json::to_value(&vecs).unwrap(),
        });
        Ok(vecs)
    }
}

/// Serves responses from a replay log. Identical requests recorded several
/// times are served in recorded order.
pub struct ReplayBackend {
    entries: Mutex<HashMap<String, VecDeque<serde_json::Value>>>,
}

impl ReplayBackend {
    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let f = File::open(path).map_err(|e| BackendError::ReplayLog(format!("{}: {e}", path.display())))?;
        let mut entries: HashMap<String, VecDeque<serde_json::Value>> = HashMap::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| BackendError::ReplayLog(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ReplayEntry =
                serde_json::from_str(&line).map_err(|e| BackendError::ReplayLog(format!("line {}: {e}", n + 1)))?;
            entries.entry(entry.fingerprint).or_default().push_back(entry.response);
        }
        Ok(Self { entries: Mutex::new(entries) })
    }

    fn take(&self, fp: &str) -> Result<serde_json::Value, BackendError> {
        let mut map = self.entries.lock().unwrap();
        let q = map.get_mut(fp).ok_or_else(|| BackendError::ReplayMiss(fp.to_string()))?;
        let v = q.pop_front().ok_or_else(|| BackendError::ReplayMiss(fp.to_string()))?;
        if q.is_empty() {
            // Keep the last response around so repeated identical calls stay stable.
            q.push_back(v.clone());
        }
        Ok(v)
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &GenerationRequest) -> Result<String, BackendError> {
        request.validate()?;
        match self.take(&request.fingerprint())? {
            serde_json::Value::String(s) => Ok(s),
            other => Err(BackendError::ReplayLog(format!("expected string response, got {other}"))),
        }
    }
}

impl EmbedBackend for ReplayBackend {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, BackendError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let fp = fingerprint("embed", &serde_json::json!({ "input": texts }));
        serde_json::from_value(self.take(&fp)?).map_err(|e| BackendError::ReplayLog(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn req(text: &str) -> GenerationRequest {
        GenerationRequest::new(vec![Message::user(text)], GENERATION_TEMPERATURE)
    }

    #[test]
    fn scripted_queue_contract() {
        let b = ScriptedBackend::queue(["A", "B"]);
        assert_eq!(b.complete(&req("x")).unwrap(), "A");
        assert_eq!(b.complete(&req("y")).unwrap(), "B");
        assert!(matches!(b.complete(&req("z")), Err(BackendError::ScriptExhausted(2))));
    }

    #[test]
    fn empty_request_rejected() {
        let b = ScriptedBackend::queue(["A"]);
        let empty = GenerationRequest::new(vec![], 0.0);
        assert!(matches!(b.complete(&empty), Err(BackendError::Precondition(_))));
    }

    #[test]
    fn keyed_script_matches_fingerprint() {
        let r = req("hello");
        let mut m = HashMap::new();
        m.insert(r.fingerprint(), "world".to_string());
        let b = ScriptedBackend::keyed(m);
        assert_eq!(b.complete(&r).unwrap(), "world");
        assert!(b.complete(&req("other")).is_err());
    }

    #[test]
    fn fingerprint_is_content_addressed() {
        assert_eq!(req("a").fingerprint(), req("a").fingerprint());
        assert_ne!(req("a").fingerprint(), req("b").fingerprint());
        let mut hot = req("a");
        hot.temperature = 0.0;
        assert_ne!(hot.fingerprint(), req("a").fingerprint());
    }

    #[test]
    fn record_then_replay_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("replay.jsonl");
        let rec = Recorder::create(ScriptedBackend::queue(["one", "two", "two-b"]), &path).unwrap();
        let outs: Vec<String> = ["p", "q", "q"].iter().map(|t| rec.complete(&req(t)).unwrap()).collect();
        drop(rec);
        let rep = ReplayBackend::load(&path).unwrap();
        let again: Vec<String> = ["p", "q", "q"].iter().map(|t| rep.complete(&req(t)).unwrap()).collect();
        assert_eq!(outs, again);
        assert!(matches!(rep.complete(&req("never")), Err(BackendError::ReplayMiss(_))));
    }

    #[test]
    fn missing_key_is_auth_error() {
        let c = HttpClient::new(HttpConfig { endpoint: "http://127.0.0.1:9".into(), ..Default::default() }, None);
        assert!(matches!(c.complete(&req("x")), Err(BackendError::Auth(_))));
        assert_eq!(c.call_count(), 0);
    }

    #[test]
    fn empty_embed_batch_is_empty() {
        let c = HttpClient::new(HttpConfig::default(), None);
        assert!(c.embed(&[]).unwrap().is_empty());
    }
}
