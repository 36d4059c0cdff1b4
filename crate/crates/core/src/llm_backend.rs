//! Language-model boundary: an HTTP chat-completions client, a scripted
//! backend for tests, and transcript recording/replay.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("authentication failed (HTTP {status})")]
    AuthFailed { status: u16 },
    #[error("gave up after {attempts} attempts: {last}")]
    ExhaustedRetries { attempts: u32, last: String },
    #[error("request timed out")]
    Timeout,
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("HTTP {status}: {body}")]
    HttpStatus { status: u16, body: String },
    #[error("api key env var `{0}` is not set")]
    MissingApiKey(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("script exhausted after {calls} calls")]
    ScriptExhausted { calls: usize },
    #[error("no scripted predicate matched prompt starting {0:?}")]
    NoPredicateMatched(String),
    #[error("prompt not present in transcript: {0:?}")]
    UnseenPrompt(String),
}

/// Pipeline stage a call (or a failure) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Catalog,
    Filter,
    Retrieval,
    Linking,
    Routing,
    Prompt,
    Generation,
    Extraction,
    Execution,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Catalog => "catalog",
            Stage::Filter => "filter",
            Stage::Retrieval => "retrieval",
            Stage::Linking => "linking",
            Stage::Routing => "routing",
            Stage::Prompt => "prompt",
            Stage::Generation => "generation",
            Stage::Extraction => "extraction",
            Stage::Execution => "execution",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Tags each call with the question it serves so per-question order survives
/// concurrent execution.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CallContext {
    pub question_id: String,
    pub stage: Stage,
}

impl CallContext {
    pub fn new(question_id: impl Into<String>, stage: Stage) -> Self {
        Self {
            question_id: question_id.into(),
            stage,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Completion {
    pub text: String,
    pub usage: Option<Usage>,
    /// Requests sent, including the successful one.
    pub attempts: u32,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: None,
            attempts: 1,
        }
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, ctx: &CallContext, prompt: &str) -> Result<Completion, BackendError>;
}

impl<B: Backend + ?Sized> Backend for Arc<B> {
    fn complete(&self, ctx: &CallContext, prompt: &str) -> Result<Completion, BackendError> {
        (**self).complete(ctx, prompt)
    }
}

/// Text-embedding boundary used by the embedding retrieval scorer.
pub trait Embedder: Send + Sync {
    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError>;
}

fn head(prompt: &str) -> String {
    prompt.chars().take(80).collect()
}

mod duration_secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let secs = f64::deserialize(d)?;
        if !secs.is_finite() || secs <= 0.0 {
            return Err(serde::de::Error::custom(
                "timeout must be a positive number of seconds",
            ));
        }
        Ok(Duration::from_secs_f64(secs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub endpoint_url: String,
    pub model_name: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub temperature: f64,
    pub max_output_tokens: u32,
    #[serde(rename = "timeout_secs", with = "duration_secs")]
    pub timeout: Duration,
    pub retries: u32,
    /// First backoff delay; doubles on every retry.
    pub backoff_base_ms: u64,
    pub embedding_model: Option<String>,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            endpoint_url: "http://localhost:8000/v1".into(),
            model_name: "gpt-4o-mini".into(),
            api_key_env: Some("OPENAI_API_KEY".into()),
            temperature: 0.0,
            max_output_tokens: 512,
            timeout: Duration::from_secs(60),
            retries: 2,
            backoff_base_ms: 1000,
            embedding_model: None,
        }
    }
}

impl BackendConfig {
    pub fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(self.backoff_base_ms.saturating_mul(1u64 << retry.min(20)))
    }

    fn api_key(&self) -> Result<Option<String>, BackendError> {
        match &self.api_key_env {
            None => Ok(None),
            Some(var) if var.is_empty() => Ok(None),
            Some(var) => std::env::var(var)
                .map(Some)
                .map_err(|_| BackendError::MissingApiKey(var.clone())),
        }
    }
}

/// Chat-completions client speaking the de facto `/chat/completions` JSON shape.
pub struct HttpBackend {
    cfg: BackendConfig,
    client: reqwest::blocking::Client,
}

enum Attempt {
    Retryable(BackendError),
    Fatal(BackendError),
}

impl HttpBackend {
    pub fn new(cfg: BackendConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(cfg.timeout)
            .build()
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        Ok(Self { cfg, client })
    }

    pub fn config(&self) -> &BackendConfig {
        &self.cfg
    }

    fn url(&self, path: &str) -> String {
        format!("{}/{path}", self.cfg.endpoint_url.trim_end_matches('/'))
    }

    fn post_once(&self, path: &str, body: &Value, key: Option<&str>) -> Result<Value, Attempt> {
        let mut req = self.client.post(self.url(path)).json(body);
        if let Some(key) = key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retryable(BackendError::Timeout)
            } else {
                Attempt::Retryable(BackendError::Transport(e.to_string()))
            }
        })?;
        let status = resp.status().as_u16();
        let text = resp.text().map_err(|e| {
            if e.is_timeout() {
                Attempt::Retryable(BackendError::Timeout)
            } else {
                Attempt::Retryable(BackendError::Transport(e.to_string()))
            }
        })?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| Attempt::Fatal(BackendError::MalformedResponse(e.to_string()))),
            401 | 403 => Err(Attempt::Fatal(BackendError::AuthFailed { status })),
            429 | 500..=599 => Err(Attempt::Retryable(BackendError::HttpStatus {
                status,
                body: text,
            })),
            _ => Err(Attempt::Fatal(BackendError::HttpStatus {
                status,
                body: text,
            })),
        }
    }

    /// Posts with retry on transport errors, 429 and 5xx. Returns the parsed
    /// body and the number of requests made.
    fn post(&self, path: &str, body: &Value) -> Result<(Value, u32), BackendError> {
        let key = self.cfg.api_key()?;
        let mut attempts = 0u32;
        loop {
            attempts += 1;
            match self.post_once(path, body, key.as_deref()) {
                Ok(v) => return Ok((v, attempts)),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retryable(e)) => {
                    if attempts > self.cfg.retries {
                        return Err(match e {
                            BackendError::Timeout => BackendError::Timeout,
                            other => BackendError::ExhaustedRetries {
                                attempts,
                                last: other.to_string(),
                            },
                        });
                    }
                    let delay = self.cfg.backoff(attempts - 1);
                    log::warn!("{e}; retrying in {delay:?} (attempt {attempts})");
                    std::thread::sleep(delay);
                }
            }
        }
    }
}

impl Backend for HttpBackend {
    fn complete(&self, _ctx: &CallContext, prompt: &str) -> Result<Completion, BackendError> {
        let body = json!({
            "model": self.cfg.model_name,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": self.cfg.temperature,
            "max_tokens": self.cfg.max_output_tokens,
        });
        let (resp, attempts) = self.post("chat/completions", &body)?;
        let text = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| {
                BackendError::MalformedResponse("missing choices[0].message.content".into())
            })?
            .to_string();
        let usage = resp.get("usage").and_then(|u| {
            Some(Usage {
                prompt_tokens: u.get("prompt_tokens")?.as_u64()?,
                completion_tokens: u.get("completion_tokens")?.as_u64()?,
            })
        });
        Ok(Completion {
            text,
            usage,
            attempts,
        })
    }
}

impl Embedder for HttpBackend {
    fn embed(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        let model = self
            .cfg
            .embedding_model
            .clone()
            .unwrap_or_else(|| self.cfg.model_name.clone());
        let (resp, _) = self.post("embeddings", &json!({"model": model, "input": text}))?;
        resp.pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .and_then(|a| a.iter().map(|v| v.as_f64().map(|f| f as f32)).collect())
            .ok_or_else(|| BackendError::MalformedResponse("missing data[0].embedding".into()))
    }
}

/// Prompt predicate for rule-mode scripts.
#[derive(Clone)]
pub enum Predicate {
    Contains(String),
    ContainsAll(Vec<String>),
    Any,
    Custom(Arc<dyn Fn(&str) -> bool + Send + Sync>),
}

impl Predicate {
    pub fn contains(s: impl Into<String>) -> Self {
        Predicate::Contains(s.into())
    }

    pub fn matches(&self, prompt: &str) -> bool {
        match self {
            Predicate::Contains(s) => prompt.contains(s.as_str()),
            Predicate::ContainsAll(all) => all.iter().all(|s| prompt.contains(s.as_str())),
            Predicate::Any => true,
            Predicate::Custom(f) => f(prompt),
        }
    }
}

impl fmt::Debug for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Predicate::Contains(s) => write!(f, "Contains({s:?})"),
            Predicate::ContainsAll(v) => write!(f, "ContainsAll({v:?})"),
            Predicate::Any => f.write_str("Any"),
            Predicate::Custom(_) => f.write_str("Custom(..)"),
        }
    }
}

enum Script {
    List(Mutex<VecDeque<String>>),
    Rules(Vec<(Predicate, String)>),
}

/// Deterministic backend answering from a fixed script.
pub struct ScriptedBackend {
    script: Script,
    calls: AtomicUsize,
}

impl ScriptedBackend {
    /// Replies are handed out in order, one per call.
    pub fn from_list<I, S>(replies: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            script: Script::List(Mutex::new(replies.into_iter().map(Into::into).collect())),
            calls: AtomicUsize::new(0),
        }
    }

    /// Each call is answered by the first rule whose predicate matches.
    pub fn from_rules(rules: Vec<(Predicate, String)>) -> Self {
        Self {
            script: Script::Rules(rules),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn call_count(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, _ctx: &CallContext, prompt: &str) -> Result<Completion, BackendError> {
        let calls = self.calls.fetch_add(1, Ordering::SeqCst);
        match &self.script {
            Script::List(queue) => queue
                .lock()
                .expect("script lock")
                .pop_front()
                .map(Completion::text)
                .ok_or(BackendError::ScriptExhausted { calls }),
            Script::Rules(rules) => rules
                .iter()
                .find(|(p, _)| p.matches(prompt))
                .map(|(_, reply)| Completion::text(reply.clone()))
                .ok_or_else(|| BackendError::NoPredicateMatched(head(prompt))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub question_id: String,
    pub stage: Stage,
    pub request: String,
    pub reply: String,
    pub latency_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub completion_tokens: Option<u64>,
    #[serde(default = "one")]
    pub attempts: u32,
}

fn one() -> u32 {
    1
}

/// Append-only call log, stored as JSON lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    pub entries: Vec<TranscriptEntry>,
}

impl Transcript {
    pub fn load(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        for (n, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(
                    std::io::ErrorKind::InvalidData,
                    format!("{}:{}: {e}", path.display(), n + 1),
                )
            })?;
            entries.push(entry);
        }
        Ok(Self { entries })
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for entry in &self.entries {
            serde_json::to_writer(&mut out, entry)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_jsonl(&mut file)?;
        file.flush()
    }

    pub fn for_question<'a>(
        &'a self,
        question_id: &'a str,
    ) -> impl Iterator<Item = &'a TranscriptEntry> {
        self.entries
            .iter()
            .filter(move |e| e.question_id == question_id)
    }
}

/// Wraps a backend and logs every successful call.
pub struct RecordingBackend {
    inner: Arc<dyn Backend>,
    entries: Mutex<Vec<TranscriptEntry>>,
}

impl RecordingBackend {
    pub fn new(inner: Arc<dyn Backend>) -> Self {
        Self {
            inner,
            entries: Mutex::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("transcript lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries recorded so far, grouped by question in the order given.
    /// Call order within a question is preserved.
    pub fn transcript_ordered(&self, question_order: &[String]) -> Transcript {
        let entries = self.entries.lock().expect("transcript lock").clone();
        let rank: HashMap<&str, usize> = question_order
            .iter()
            .enumerate()
            .map(|(i, q)| (q.as_str(), i))
            .collect();
        let mut indexed: Vec<(usize, usize, TranscriptEntry)> = entries
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                (
                    rank.get(e.question_id.as_str())
                        .copied()
                        .unwrap_or(usize::MAX),
                    i,
                    e,
                )
            })
            .collect();
        indexed.sort_by_key(|(r, i, _)| (*r, *i));
        Transcript {
            entries: indexed.into_iter().map(|(_, _, e)| e).collect(),
        }
    }

    pub fn transcript(&self) -> Transcript {
        Transcript {
            entries: self.entries.lock().expect("transcript lock").clone(),
        }
    }
}

impl Backend for RecordingBackend {
    fn complete(&self, ctx: &CallContext, prompt: &str) -> Result<Completion, BackendError> {
        let start = Instant::now();
        let completion = self.inner.complete(ctx, prompt)?;
        let entry = TranscriptEntry {
            question_id: ctx.question_id.clone(),
            stage: ctx.stage,
            request: prompt.to_string(),
            reply: completion.text.clone(),
            latency_ms: start.elapsed().as_millis() as u64,
            prompt_tokens: completion.usage.map(|u| u.prompt_tokens),
            completion_tokens: completion.usage.map(|u| u.completion_tokens),
            attempts: completion.attempts,
        };
        self.entries.lock().expect("transcript lock").push(entry);
        Ok(completion)
    }
}

#[derive(Default)]
struct ReplayQueue {
    replies: Vec<String>,
    next: usize,
}

impl ReplayQueue {
    fn next_reply(&mut self) -> String {
        let i = self.next.min(self.replies.len() - 1);
        self.next += 1;
        self.replies[i].clone()
    }
}

/// Answers from a recorded transcript by exact request text. Repeated
/// identical requests get the recorded replies in order; past the end the
/// last reply repeats.
pub struct ReplayBackend {
    by_question: Mutex<HashMap<(String, String), ReplayQueue>>,
    by_prompt: Mutex<HashMap<String, ReplayQueue>>,
}

impl ReplayBackend {
    pub fn new(transcript: &Transcript) -> Self {
        let mut by_question: HashMap<(String, String), ReplayQueue> = HashMap::new();
        let mut by_prompt: HashMap<String, ReplayQueue> = HashMap::new();
        for e in &transcript.entries {
            by_question
                .entry((e.question_id.clone(), e.request.clone()))
                .or_default()
                .replies
                .push(e.reply.clone());
            by_prompt
                .entry(e.request.clone())
                .or_default()
                .replies
                .push(e.reply.clone());
        }
        Self {
            by_question: Mutex::new(by_question),
            by_prompt: Mutex::new(by_prompt),
        }
    }
}

impl Backend for ReplayBackend {
    fn complete(&self, ctx: &CallContext, prompt: &str) -> Result<Completion, BackendError> {
        let key = (ctx.question_id.clone(), prompt.to_string());
        if let Some(q) = self.by_question.lock().expect("replay lock").get_mut(&key) {
            return Ok(Completion::text(q.next_reply()));
        }
        if let Some(q) = self.by_prompt.lock().expect("replay lock").get_mut(prompt) {
            return Ok(Completion::text(q.next_reply()));
        }
        Err(BackendError::UnseenPrompt(head(prompt)))
    }
}
