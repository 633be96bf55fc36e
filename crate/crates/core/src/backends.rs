//! Model backends: a deterministic scripted double and a chat-completions
//! HTTP client.

use std::fmt;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tracing::warn;

use crate::error::{Error, Result};

/// Returned by the scripted backend when no rule matches a prompt.
pub const UNMATCHED: &str = "UNMATCHED";

/// Environment variable holding the HTTP backend's API key.
pub const API_KEY_ENV: &str = "MEMLOOP_API_KEY";

/// The base model: prompt in, completion out.
pub trait ModelBackend: Send + Sync {
    fn identifier(&self) -> &str;

    fn complete(&self, prompt: &str) -> Result<String>;

    /// Opaque resumable state, if the backend has any.
    fn save_state(&self) -> Option<Value> {
        None
    }

    fn restore_state(&self, _state: &Value) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RuleMatch {
    Exact { text: String },
    Contains { text: String },
    Always,
}

impl RuleMatch {
    fn matches(&self, prompt: &str) -> bool {
        match self {
            RuleMatch::Exact { text } => prompt == text,
            RuleMatch::Contains { text } => prompt.contains(text.as_str()),
            RuleMatch::Always => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptedRule {
    #[serde(rename = "match")]
    pub matcher: RuleMatch,
    pub responses: Vec<String>,
}

impl ScriptedRule {
    pub fn exact(text: impl Into<String>, responses: &[&str]) -> Self {
        Self::new(RuleMatch::Exact { text: text.into() }, responses)
    }

    pub fn contains(text: impl Into<String>, responses: &[&str]) -> Self {
        Self::new(RuleMatch::Contains { text: text.into() }, responses)
    }

    pub fn always(responses: &[&str]) -> Self {
        Self::new(RuleMatch::Always, responses)
    }

    fn new(matcher: RuleMatch, responses: &[&str]) -> Self {
        Self {
            matcher,
            responses: responses.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    rules: Vec<ScriptedRule>,
}

/// Rule-driven test double. First matching rule wins; each rule cycles
/// through its responses.
pub struct ScriptedBackend {
    identifier: String,
    rules: Vec<ScriptedRule>,
    cursors: Vec<AtomicUsize>,
}

impl ScriptedBackend {
    pub fn new(identifier: impl Into<String>, rules: Vec<ScriptedRule>) -> Result<Self> {
        if let Some(r) = rules.iter().find(|r| r.responses.is_empty()) {
            return Err(Error::Config(format!("scripted rule {:?} has no responses", r.matcher)));
        }
        let cursors = rules.iter().map(|_| AtomicUsize::new(0)).collect();
        Ok(Self {
            identifier: identifier.into(),
            rules,
            cursors,
        })
    }

    pub fn from_json(identifier: impl Into<String>, json: &str) -> Result<Self> {
        let file: RuleFile = serde_json::from_str(json)?;
        Self::new(identifier, file.rules)
    }

    pub fn from_file(identifier: impl Into<String>, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(identifier, &text)
    }
}

impl ModelBackend for ScriptedBackend {
    fn identifier(&self) -> &str {
        &self.identifier
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("prompt must not be empty".into()));
        }
        for (rule, cursor) in self.rules.iter().zip(&self.cursors) {
            if rule.matcher.matches(prompt) {
                let n = cursor.fetch_add(1, Ordering::SeqCst);
                return Ok(rule.responses[n % rule.responses.len()].clone());
            }
        }
        Ok(UNMATCHED.to_string())
    }

    fn save_state(&self) -> Option<Value> {
        let cursors: Vec<usize> = self.cursors.iter().map(|c| c.load(Ordering::SeqCst)).collect();
        Some(json!({ "cursors": cursors }))
    }

    fn restore_state(&self, state: &Value) -> Result<()> {
        let cursors: Vec<usize> = serde_json::from_value(state["cursors"].clone())?;
        if cursors.len() != self.cursors.len() {
            return Err(Error::Config(format!(
                "saved state has {} rule cursors, backend has {}",
                cursors.len(),
                self.cursors.len()
            )));
        }
        for (c, v) in self.cursors.iter().zip(cursors) {
            c.store(v, Ordering::SeqCst);
        }
        Ok(())
    }
}

type CompletionFn = dyn Fn(&str) -> Result<String> + Send + Sync;

/// Backend computed by a closure over the prompt. Useful for simulated agents
/// whose replies depend on prompt structure rather than fixed rules.
pub struct FnBackend {
    identifier: String,
    f: Box<CompletionFn>,
}

impl FnBackend {
    pub fn new(identifier: impl Into<String>, f: impl Fn(&str) -> Result<String> + Send + Sync + 'static) -> Self {
        Self {
            identifier: identifier.into(),
            f: Box::new(f),
        }
    }
}

impl ModelBackend for FnBackend {
    fn identifier(&self) -> &str {
        &self.identifier
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("prompt must not be empty".into()));
        }
        (self.f)(prompt)
    }
}

#[derive(Clone)]
pub struct HttpConfig {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub timeout: Duration,
    pub max_retries: u32,
    pub backoff_base: Duration,
    pub api_key: Option<String>,
}

impl fmt::Debug for HttpConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpConfig")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("temperature", &self.temperature)
            .field("timeout", &self.timeout)
            .field("max_retries", &self.max_retries)
            .field("backoff_base", &self.backoff_base)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            temperature: 0.0,
            timeout: Duration::from_secs(60),
            max_retries: 3,
            backoff_base: Duration::from_millis(500),
            api_key: None,
        }
    }
}

/// Chat-completions style client with exponential backoff on timeouts and
/// 5xx responses.
pub struct HttpBackend {
    cfg: HttpConfig,
    agent: ureq::Agent,
    attempts: AtomicUsize,
    retries: AtomicUsize,
}

impl fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("HttpBackend").field("cfg", &self.cfg).finish()
    }
}

enum Attempt {
    Done(String),
    Retryable(String),
    Fatal(String),
}

impl HttpBackend {
    pub fn new(cfg: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(cfg.timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            cfg,
            agent,
            attempts: AtomicUsize::new(0),
            retries: AtomicUsize::new(0),
        }
    }

    /// Total HTTP attempts made so far.
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }

    /// Total retries (attempts beyond the first per call) made so far.
    pub fn retries(&self) -> usize {
        self.retries.load(Ordering::SeqCst)
    }

    fn attempt(&self, body: &Value) -> Attempt {
        self.attempts.fetch_add(1, Ordering::SeqCst);
        let mut req = self.agent.post(&self.cfg.endpoint);
        if let Some(key) = &self.cfg.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(t)) => return Attempt::Retryable(format!("timeout ({t})")),
            Err(ureq::Error::Io(e)) => return Attempt::Retryable(format!("io: {e}")),
            Err(e) => return Attempt::Fatal(format!("request failed: {e}")),
        };
        let status = resp.status().as_u16();
        if status >= 500 {
            return Attempt::Retryable(format!("status {status}"));
        }
        if status != 200 {
            return Attempt::Fatal(format!("status {status}"));
        }
        let body: Value = match resp.into_body().read_json() {
            Ok(v) => v,
            Err(e) => return Attempt::Fatal(format!("malformed response body: {e}")),
        };
        match body["choices"][0]["message"]["content"].as_str() {
            Some(text) => Attempt::Done(text.to_string()),
            None => Attempt::Fatal("malformed response body: no choices[0].message.content".into()),
        }
    }
}

impl ModelBackend for HttpBackend {
    fn identifier(&self) -> &str {
        &self.cfg.model
    }

    fn complete(&self, prompt: &str) -> Result<String> {
        if prompt.is_empty() {
            return Err(Error::InvalidInput("prompt must not be empty".into()));
        }
        let body = json!({
            "model": self.cfg.model,
            "messages": [{ "role": "user", "content": prompt }],
            "temperature": self.cfg.temperature,
        });
        let mut delay = self.cfg.backoff_base;
        let mut retry = 0;
        loop {
            match self.attempt(&body) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(msg) => return Err(Error::Backend(msg)),
                Attempt::Retryable(msg) => {
                    if retry >= self.cfg.max_retries {
                        return Err(Error::Backend(format!("giving up after {} attempts: {msg}", retry + 1)));
                    }
                    retry += 1;
                    self.retries.fetch_add(1, Ordering::SeqCst);
                    warn!(model = %self.cfg.model, retry, reason = %msg, "retrying completion");
                    thread::sleep(delay);
                    delay *= 2;
                }
            }
        }
    }
}
