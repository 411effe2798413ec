//! Scoring backends: the only boundary to a language model.
//!
//! Candidates travel as text surfaces. The harness decides the tokenization
//! strategy; a backend only reports one next-token logit per surface.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::fingerprint::prompt_fingerprint;

pub const REQUEST_ID_HEADER: &str = "x-request-id";

#[derive(Debug, Clone, thiserror::Error, PartialEq)]
pub enum BackendError {
    #[error("invalid request: {0}")]
    Precondition(String),
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("candidate {candidate:?} rejected: {reason}")]
    CandidateRejected { candidate: String, reason: String },
    #[error("backend reports sampling enabled; greedy decoding is required")]
    SamplingEnabled,
    #[error("server error {status}: {body}")]
    Server { status: u16, body: String },
    #[error("invalid backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Only transport failures are retried.
    pub fn is_retryable(&self) -> bool {
        matches!(self, BackendError::Transport(_))
    }
}

pub type Result<T> = std::result::Result<T, BackendError>;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub prompt: String,
    pub candidates: Vec<String>,
}

impl ScoreRequest {
    pub fn new(prompt: impl Into<String>, candidates: Vec<String>) -> Self {
        Self {
            prompt: prompt.into(),
            candidates,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt.is_empty() {
            return Err(BackendError::Precondition("empty prompt".into()));
        }
        if self.candidates.is_empty() {
            return Err(BackendError::Precondition("empty candidate list".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &self.candidates {
            if !seen.insert(c) {
                return Err(BackendError::Precondition(format!(
                    "duplicate candidate {c:?}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreResponse {
    pub logits: Vec<f64>,
}

impl ScoreResponse {
    /// Checks alignment and finiteness against the request it answers.
    pub fn check_against(&self, req: &ScoreRequest) -> Result<()> {
        if self.logits.len() != req.candidates.len() {
            return Err(BackendError::Malformed(format!(
                "{} logits for {} candidates",
                self.logits.len(),
                req.candidates.len()
            )));
        }
        if let Some((i, v)) = self.logits.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(BackendError::Malformed(format!(
                "logit {i} for {:?} is not finite ({v})",
                req.candidates[i]
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub prompt: String,
    pub max_tokens: usize,
    #[serde(default)]
    pub stop: Vec<String>,
}

impl GenerateRequest {
    pub fn validate(&self) -> Result<()> {
        if self.max_tokens < 1 {
            return Err(BackendError::Precondition("max_tokens must be >= 1".into()));
        }
        if self.prompt.is_empty() {
            return Err(BackendError::Precondition("empty prompt".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub text: String,
    /// Servers may report their decoding mode; `Some(false)` is a protocol violation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub greedy: Option<bool>,
}

/// Anything that can score candidate continuations and decode greedily.
pub trait ScoringBackend: Send + Sync {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse>;

    fn generate(&self, req: &GenerateRequest) -> Result<String>;

    fn describe(&self) -> String;
}

/// Cuts `text` before the first stop sequence, then keeps at most
/// `max_tokens` whitespace-delimited words (the mock's notion of a token).
pub fn truncate_generation(text: &str, stop: &[String], max_tokens: usize) -> String {
    let cut = stop
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min()
        .unwrap_or(text.len());
    let text = &text[..cut];
    let mut words = 0;
    let mut in_word = false;
    for (i, ch) in text.char_indices() {
        if ch.is_whitespace() {
            in_word = false;
        } else if !in_word {
            in_word = true;
            words += 1;
            if words > max_tokens {
                return text[..i].to_string();
            }
        }
    }
    text.to_string()
}

/// Which prompt a mock table entry applies to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PromptKey {
    Fingerprint { fingerprint: String },
    Prompt { prompt: String },
}

impl PromptKey {
    fn fingerprint(&self) -> String {
        match self {
            PromptKey::Fingerprint { fingerprint } => fingerprint.clone(),
            PromptKey::Prompt { prompt } => prompt_fingerprint(prompt),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockScore {
    #[serde(flatten)]
    pub key: PromptKey,
    pub candidate: String,
    pub logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockGeneration {
    #[serde(flatten)]
    pub key: PromptKey,
    pub text: String,
}

/// Scripted scores and generations. Lookups fall back from the exact
/// `(prompt fingerprint, candidate)` entry, to a prompt-independent
/// per-candidate logit, to `default_logit`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockBackendSpec {
    #[serde(default)]
    pub default_logit: f64,
    #[serde(default)]
    pub candidate_logits: BTreeMap<String, f64>,
    #[serde(default)]
    pub scores: Vec<MockScore>,
    #[serde(default)]
    pub generations: Vec<MockGeneration>,
    #[serde(default)]
    pub default_generation: String,
}

impl Default for MockBackendSpec {
    fn default() -> Self {
        Self {
            default_logit: 0.0,
            candidate_logits: BTreeMap::new(),
            scores: Vec::new(),
            generations: Vec::new(),
            default_generation: String::new(),
        }
    }
}

impl MockBackendSpec {
    pub fn with_default(default_logit: f64) -> Self {
        Self {
            default_logit,
            ..Self::default()
        }
    }

    pub fn score(&mut self, prompt: &str, candidate: &str, logit: f64) -> &mut Self {
        self.scores.push(MockScore {
            key: PromptKey::Fingerprint {
                fingerprint: prompt_fingerprint(prompt),
            },
            candidate: candidate.to_string(),
            logit,
        });
        self
    }

    pub fn generation(&mut self, prompt: &str, text: &str) -> &mut Self {
        self.generations.push(MockGeneration {
            key: PromptKey::Fingerprint {
                fingerprint: prompt_fingerprint(prompt),
            },
            text: text.to_string(),
        });
        self
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)
    }
}

/// Deterministic in-process backend with call counters.
#[derive(Debug)]
pub struct MockBackend {
    default_logit: f64,
    candidate_logits: HashMap<String, f64>,
    scores: HashMap<(String, String), f64>,
    generations: HashMap<String, String>,
    default_generation: String,
    score_calls: AtomicUsize,
    generate_calls: AtomicUsize,
}

impl MockBackend {
    pub fn new(spec: MockBackendSpec) -> Self {
        let scores = spec
            .scores
            .into_iter()
            .map(|s| ((s.key.fingerprint(), s.candidate), s.logit))
            .collect();
        let generations = spec
            .generations
            .into_iter()
            .map(|g| (g.key.fingerprint(), g.text))
            .collect();
        Self {
            default_logit: spec.default_logit,
            candidate_logits: spec.candidate_logits.into_iter().collect(),
            scores,
            generations,
            default_generation: spec.default_generation,
            score_calls: AtomicUsize::new(0),
            generate_calls: AtomicUsize::new(0),
        }
    }

    pub fn score_calls(&self) -> usize {
        self.score_calls.load(Ordering::SeqCst)
    }

    pub fn generate_calls(&self) -> usize {
        self.generate_calls.load(Ordering::SeqCst)
    }

    pub fn total_calls(&self) -> usize {
        self.score_calls() + self.generate_calls()
    }

    pub fn reset_counters(&self) {
        self.score_calls.store(0, Ordering::SeqCst);
        self.generate_calls.store(0, Ordering::SeqCst);
    }

    fn lookup(&self, fingerprint: &str, candidate: &str) -> f64 {
        self.scores
            .get(&(fingerprint.to_string(), candidate.to_string()))
            .or_else(|| self.candidate_logits.get(candidate))
            .copied()
            .unwrap_or(self.default_logit)
    }
}

impl ScoringBackend for MockBackend {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        req.validate()?;
        self.score_calls.fetch_add(1, Ordering::SeqCst);
        let fp = prompt_fingerprint(&req.prompt);
        Ok(ScoreResponse {
            logits: req.candidates.iter().map(|c| self.lookup(&fp, c)).collect(),
        })
    }

    fn generate(&self, req: &GenerateRequest) -> Result<String> {
        req.validate()?;
        self.generate_calls.fetch_add(1, Ordering::SeqCst);
        let text = self
            .generations
            .get(&prompt_fingerprint(&req.prompt))
            .unwrap_or(&self.default_generation);
        Ok(truncate_generation(text, &req.stop, req.max_tokens))
    }

    fn describe(&self) -> String {
        "mock".into()
    }
}

impl<B: ScoringBackend + ?Sized> ScoringBackend for std::sync::Arc<B> {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        (**self).score(req)
    }

    fn generate(&self, req: &GenerateRequest) -> Result<String> {
        (**self).generate(req)
    }

    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// Bounded exponential backoff for transport failures.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_retries: 3,
            initial_backoff_ms: 200,
            max_backoff_ms: 5_000,
        }
    }
}

impl RetryPolicy {
    pub fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }

    pub fn run<T>(&self, mut call: impl FnMut() -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match call() {
                Err(e) if e.is_retryable() && attempt < self.max_retries => {
                    tracing::warn!(attempt, error = %e, "retrying backend call");
                    std::thread::sleep(self.backoff(attempt));
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

#[derive(Debug, Deserialize)]
struct ErrorBody {
    #[serde(default)]
    error: String,
    #[serde(default)]
    candidate: Option<String>,
}

/// Client for the `/v1/score` and `/v1/generate` wire protocol.
pub struct HttpBackend {
    base_url: String,
    bearer_token: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
    next_id: AtomicU64,
}

impl HttpBackend {
    pub fn new(base_url: impl Into<String>) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            bearer_token: None,
            retry: RetryPolicy::default(),
            agent,
            next_id: AtomicU64::new(1),
        }
    }

    pub fn with_bearer_token(mut self, token: impl Into<String>) -> Self {
        self.bearer_token = Some(token.into());
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn post<Req: Serialize, Resp: serde::de::DeserializeOwned>(
        &self,
        path: &str,
        body: &Req,
    ) -> Result<Resp> {
        let request_id = self.next_id.fetch_add(1, Ordering::Relaxed).to_string();
        let url = format!("{}{}", self.base_url, path);
        let mut req = self
            .agent
            .post(&url)
            .header(REQUEST_ID_HEADER, &request_id);
        if let Some(token) = &self.bearer_token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.send_json(body).map_err(classify_ureq)?;
        let status = resp.status().as_u16();
        if let Some(echo) = resp.headers().get(REQUEST_ID_HEADER) {
            if echo.as_bytes() != request_id.as_bytes() {
                return Err(BackendError::Malformed(format!(
                    "response correlation id {echo:?} does not match request {request_id}"
                )));
            }
        }
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(classify_ureq)?;
        match status {
            200..=299 => serde_json::from_str(&text)
                .map_err(|e| BackendError::Malformed(format!("{e}: {text}"))),
            422 => {
                let body: ErrorBody = serde_json::from_str(&text).unwrap_or(ErrorBody {
                    error: text.clone(),
                    candidate: None,
                });
                Err(BackendError::CandidateRejected {
                    candidate: body.candidate.unwrap_or_default(),
                    reason: body.error,
                })
            }
            500..=599 => Err(BackendError::Transport(format!("status {status}: {text}"))),
            _ => Err(BackendError::Server { status, body: text }),
        }
    }
}

fn classify_ureq(e: ureq::Error) -> BackendError {
    match e {
        ureq::Error::Json(e) => BackendError::Malformed(e.to_string()),
        ureq::Error::BadUri(u) => BackendError::Config(format!("bad endpoint uri {u}")),
        other => BackendError::Transport(other.to_string()),
    }
}

impl ScoringBackend for HttpBackend {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        req.validate()?;
        let resp: ScoreResponse = self.retry.run(|| self.post("/v1/score", req))?;
        resp.check_against(req)?;
        Ok(resp)
    }

    fn generate(&self, req: &GenerateRequest) -> Result<String> {
        req.validate()?;
        let resp: GenerateResponse = self.retry.run(|| self.post("/v1/generate", req))?;
        if resp.greedy == Some(false) {
            return Err(BackendError::SamplingEnabled);
        }
        Ok(resp.text)
    }

    fn describe(&self) -> String {
        format!("endpoint {}", self.base_url)
    }
}

/// Reference mapping onto an OpenAI-style `/v1/completions` endpoint that
/// returns `top_logprobs`. Each candidate must appear among the top-k
/// next-token alternatives; log-probabilities stand in for logits since they
/// differ by a per-prompt constant, which the candidate softmax cancels.
pub struct CompletionsAdapter {
    base_url: String,
    model: String,
    top_logprobs: u32,
    bearer_token: Option<String>,
    retry: RetryPolicy,
    agent: ureq::Agent,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<CompletionChoice>,
}

#[derive(Debug, Deserialize)]
struct CompletionChoice {
    text: String,
    #[serde(default)]
    logprobs: Option<CompletionLogprobs>,
}

#[derive(Debug, Deserialize)]
struct CompletionLogprobs {
    top_logprobs: Vec<HashMap<String, f64>>,
}

impl CompletionsAdapter {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, top_logprobs: u32) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(120)))
            .build()
            .into();
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            model: model.into(),
            top_logprobs,
            bearer_token: None,
            retry: RetryPolicy::default(),
            agent,
        }
    }

    pub fn with_bearer_token(mut self, token: impl Into<String>) -> Self {
        self.bearer_token = Some(token.into());
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    fn complete(&self, body: serde_json::Value) -> Result<CompletionResponse> {
        self.retry.run(|| {
            let mut req = self.agent.post(&format!("{}/v1/completions", self.base_url));
            if let Some(token) = &self.bearer_token {
                req = req.header("Authorization", &format!("Bearer {token}"));
            }
            let mut resp = req.send_json(&body).map_err(classify_ureq)?;
            let status = resp.status().as_u16();
            let text = resp.body_mut().read_to_string().map_err(classify_ureq)?;
            match status {
                200..=299 => serde_json::from_str(&text)
                    .map_err(|e| BackendError::Malformed(format!("{e}: {text}"))),
                500..=599 => Err(BackendError::Transport(format!("status {status}: {text}"))),
                _ => Err(BackendError::Server { status, body: text }),
            }
        })
    }
}

impl ScoringBackend for CompletionsAdapter {
    fn score(&self, req: &ScoreRequest) -> Result<ScoreResponse> {
        req.validate()?;
        let resp = self.complete(serde_json::json!({
            "model": self.model,
            "prompt": req.prompt,
            "max_tokens": 1,
            "temperature": 0.0,
            "logprobs": self.top_logprobs,
        }))?;
        let top = resp
            .choices
            .first()
            .and_then(|c| c.logprobs.as_ref())
            .and_then(|l| l.top_logprobs.first())
            .ok_or_else(|| BackendError::Malformed("missing top_logprobs".into()))?;
        let logits = req
            .candidates
            .iter()
            .map(|c| {
                top.get(c).copied().ok_or_else(|| BackendError::CandidateRejected {
                    candidate: c.clone(),
                    reason: format!("not among the top {} next tokens", self.top_logprobs),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let resp = ScoreResponse { logits };
        resp.check_against(req)?;
        Ok(resp)
    }

    fn generate(&self, req: &GenerateRequest) -> Result<String> {
        req.validate()?;
        let resp = self.complete(serde_json::json!({
            "model": self.model,
            "prompt": req.prompt,
            "max_tokens": req.max_tokens,
            "temperature": 0.0,
            "stop": req.stop,
        }))?;
        resp.choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| BackendError::Malformed("no choices".into()))
    }

    fn describe(&self) -> String {
        format!("completions {} ({})", self.base_url, self.model)
    }
}
