//! Stream specification: everything needed to run one task stream.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::agent::AgentConfig;
use crate::backends::{HttpBackend, HttpConfig, ModelBackend, ScriptedBackend, API_KEY_ENV};
use crate::environments::DEFAULT_STEP_CAP;
use crate::error::{Error, Result};
use crate::memory::PolicyTag;
use crate::retrieval::{Embedder, HashEmbedder, HttpEmbedder, RetrievalConfig, DEFAULT_DIMENSION};

pub const DEFAULT_CHECKPOINT_EVERY: usize = 10;
pub const DEFAULT_HISTORY_WINDOW: usize = 5;

/// Order in which a task file is streamed. Serialized as `given`,
/// `easy_to_hard`, `hard_to_easy` or `shuffled:<seed>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum StreamOrder {
    #[default]
    Given,
    EasyToHard,
    HardToEasy,
    Shuffled(u64),
}

impl fmt::Display for StreamOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StreamOrder::Given => f.write_str("given"),
            StreamOrder::EasyToHard => f.write_str("easy_to_hard"),
            StreamOrder::HardToEasy => f.write_str("hard_to_easy"),
            StreamOrder::Shuffled(seed) => write!(f, "shuffled:{seed}"),
        }
    }
}

impl FromStr for StreamOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "given" => Ok(StreamOrder::Given),
            "easy_to_hard" => Ok(StreamOrder::EasyToHard),
            "hard_to_easy" => Ok(StreamOrder::HardToEasy),
            _ => match s.strip_prefix("shuffled:") {
                Some(seed) => seed
                    .parse()
                    .map(StreamOrder::Shuffled)
                    .map_err(|_| Error::Config(format!("bad shuffle seed in `{s}`"))),
                None => Err(Error::Config(format!(
                    "unknown ordering `{s}` (expected given, easy_to_hard, hard_to_easy or shuffled:<seed>)"
                ))),
            },
        }
    }
}

impl TryFrom<String> for StreamOrder {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<StreamOrder> for String {
    fn from(o: StreamOrder) -> String {
        o.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MemoryConfig {
    pub capacity: Option<usize>,
    pub ingest_failures: bool,
    pub history_window: usize,
}

impl Default for MemoryConfig {
    fn default() -> Self {
        Self {
            capacity: None,
            ingest_failures: false,
            history_window: DEFAULT_HISTORY_WINDOW,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub name: String,
    pub dimension: usize,
    /// When set, vectors come from this HTTP service instead of the built-in
    /// hashed bag-of-words embedder.
    pub endpoint: Option<String>,
    pub timeout: f64,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            name: HashEmbedder::NAME.into(),
            dimension: DEFAULT_DIMENSION,
            endpoint: None,
            timeout: 30.0,
        }
    }
}

impl EmbedderConfig {
    pub fn build(&self) -> Result<Box<dyn Embedder>> {
        match &self.endpoint {
            Some(url) => Ok(Box::new(HttpEmbedder::new(
                self.name.clone(),
                url.clone(),
                self.dimension,
                seconds(self.timeout)?,
            ))),
            None if self.name == HashEmbedder::NAME => Ok(Box::new(HashEmbedder::new(self.dimension)?)),
            None => Err(Error::Config(format!(
                "embedder `{}` needs embedder.endpoint (only `{}` is built in)",
                self.name,
                HashEmbedder::NAME
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Scripted,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    pub identifier: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default = "default_timeout")]
    pub timeout: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
    /// Rule file for the scripted backend.
    #[serde(default)]
    pub rules_path: Option<PathBuf>,
}

fn default_timeout() -> f64 {
    60.0
}

fn default_max_retries() -> u32 {
    3
}

fn seconds(s: f64) -> Result<Duration> {
    Duration::try_from_secs_f64(s).map_err(|_| Error::Config(format!("bad timeout {s}")))
}

impl BackendConfig {
    pub fn scripted(identifier: impl Into<String>, rules_path: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Scripted,
            identifier: identifier.into(),
            endpoint: None,
            timeout: default_timeout(),
            max_retries: default_max_retries(),
            temperature: 0.0,
            rules_path: Some(rules_path.into()),
        }
    }

    pub fn build(&self) -> Result<Box<dyn ModelBackend>> {
        match self.kind {
            BackendKind::Scripted => {
                let path = self
                    .rules_path
                    .as_ref()
                    .ok_or_else(|| Error::Config("scripted backend needs backend.rules_path".into()))?;
                Ok(Box::new(ScriptedBackend::from_file(self.identifier.clone(), path)?))
            }
            BackendKind::Http => {
                let endpoint = self
                    .endpoint
                    .clone()
                    .ok_or_else(|| Error::Config("http backend needs backend.endpoint".into()))?;
                let mut cfg = HttpConfig::new(endpoint, self.identifier.clone());
                cfg.temperature = self.temperature;
                cfg.timeout = seconds(self.timeout)?;
                cfg.max_retries = self.max_retries;
                cfg.api_key = std::env::var(API_KEY_ENV).ok();
                Ok(Box::new(HttpBackend::new(cfg)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HarnessConfig {
    pub checkpoint_every: usize,
    pub step_cap: usize,
    /// Off for byte-reproducible result logs.
    pub record_wall_time: bool,
    pub record_prompts: bool,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            checkpoint_every: DEFAULT_CHECKPOINT_EVERY,
            step_cap: DEFAULT_STEP_CAP,
            record_wall_time: true,
            record_prompts: true,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_log_level() -> String {
    "info".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamSpec {
    pub run_id: String,
    pub tasks_path: PathBuf,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default = "default_log_level")]
    pub log_level: String,
    #[serde(default)]
    pub ordering: StreamOrder,
    pub policy: PolicyTag,
    #[serde(default)]
    pub memory: MemoryConfig,
    #[serde(default)]
    pub retrieval: RetrievalConfig,
    #[serde(default)]
    pub embedder: EmbedderConfig,
    #[serde(default)]
    pub agent: AgentConfig,
    pub backend: BackendConfig,
    #[serde(default)]
    pub harness: HarnessConfig,
}

impl StreamSpec {
    pub fn new(run_id: impl Into<String>, policy: PolicyTag, backend: BackendConfig) -> Self {
        Self {
            run_id: run_id.into(),
            tasks_path: PathBuf::new(),
            output_dir: default_output_dir(),
            log_level: default_log_level(),
            ordering: StreamOrder::Given,
            policy,
            memory: MemoryConfig::default(),
            retrieval: RetrievalConfig::default(),
            embedder: EmbedderConfig::default(),
            agent: AgentConfig::default(),
            backend,
            harness: HarnessConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.run_id.is_empty() || self.run_id.contains(['/', '\\']) || self.run_id.starts_with('.') {
            return Err(Error::Config(format!(
                "run_id `{}` is not a valid directory name",
                self.run_id
            )));
        }
        self.retrieval.validate()?;
        self.agent.validate()?;
        if self.memory.capacity == Some(0) {
            return Err(Error::Config("memory.capacity must be positive".into()));
        }
        if self.memory.history_window == 0 {
            return Err(Error::Config("memory.history_window must be positive".into()));
        }
        if self.harness.checkpoint_every == 0 || self.harness.step_cap == 0 {
            return Err(Error::Config(
                "harness.checkpoint_every and harness.step_cap must be positive".into(),
            ));
        }
        if self.embedder.dimension == 0 {
            return Err(Error::Config("embedder.dimension must be positive".into()));
        }
        Ok(())
    }

    /// Resolves relative file paths against `base` (usually the directory of
    /// the config file).
    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.tasks_path);
        fix(&mut self.output_dir);
        if let Some(p) = self.backend.rules_path.as_mut() {
            fix(p);
        }
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(&self.run_id)
    }
}
