//! Embedding and exact top-k retrieval over active memory entries.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{MemoryState, Outcome};
use crate::vector;

pub const DEFAULT_K: usize = 4;
pub const DEFAULT_DIMENSION: usize = 256;

/// Maps text to unit-norm vectors. Implementations must be deterministic.
pub trait Embedder: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        texts.iter().map(|t| self.embed(t)).collect()
    }
}

/// Hashed bag-of-words embedder: lowercase, split on non-alphanumerics,
/// FNV-1a each token into a bucket, count, L2-normalize.
#[derive(Debug, Clone)]
pub struct HashEmbedder {
    dimension: usize,
}

impl HashEmbedder {
    pub const NAME: &'static str = "hash-bow";

    pub fn new(dimension: usize) -> Result<Self> {
        if dimension == 0 {
            return Err(Error::InvalidInput("embedder dimension must be positive".into()));
        }
        Ok(Self { dimension })
    }
}

impl Default for HashEmbedder {
    fn default() -> Self {
        Self {
            dimension: DEFAULT_DIMENSION,
        }
    }
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for HashEmbedder {
    fn name(&self) -> &str {
        Self::NAME
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut v = vec![0.0; self.dimension];
        let lower = text.to_lowercase();
        for token in lower.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()) {
            let bucket = (fnv1a64(token.as_bytes()) % self.dimension as u64) as usize;
            v[bucket] += 1.0;
        }
        Ok(vector::normalize(v))
    }
}

/// Embedder backed by an HTTP service taking `{"texts": [..]}` and answering
/// `{"vectors": [[..]]}`. Vectors are re-normalized on receipt.
pub struct HttpEmbedder {
    name: String,
    endpoint: String,
    dimension: usize,
    agent: ureq::Agent,
}

#[derive(Serialize)]
struct EmbedRequest<'a> {
    texts: &'a [&'a str],
}

#[derive(Deserialize)]
struct EmbedResponse {
    vectors: Vec<Vec<f64>>,
}

impl HttpEmbedder {
    pub fn new(name: impl Into<String>, endpoint: impl Into<String>, dimension: usize, timeout: Duration) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            name: name.into(),
            endpoint: endpoint.into(),
            dimension,
            agent,
        }
    }
}

impl Embedder for HttpEmbedder {
    fn name(&self) -> &str {
        &self.name
    }

    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut out = self.embed_batch(&[text])?;
        out.pop()
            .ok_or_else(|| Error::Backend("embedder returned no vectors".into()))
    }

    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>> {
        let resp = self
            .agent
            .post(&self.endpoint)
            .send_json(EmbedRequest { texts })
            .map_err(|e| Error::Backend(format!("embedder request failed: {e}")))?;
        let status = resp.status().as_u16();
        if status != 200 {
            return Err(Error::Backend(format!("embedder returned status {status}")));
        }
        let body: EmbedResponse = resp
            .into_body()
            .read_json()
            .map_err(|e| Error::Backend(format!("malformed embedder response: {e}")))?;
        if body.vectors.len() != texts.len() {
            return Err(Error::Backend(format!(
                "embedder returned {} vectors for {} texts",
                body.vectors.len(),
                texts.len()
            )));
        }
        body.vectors
            .into_iter()
            .map(|v| {
                if v.len() != self.dimension {
                    return Err(Error::Backend(format!(
                        "embedder returned dimension {}, expected {}",
                        v.len(),
                        self.dimension
                    )));
                }
                Ok(vector::normalize(v))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub k: usize,
    pub min_score: Option<f64>,
    pub exclude_failures: bool,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: DEFAULT_K,
            min_score: None,
            exclude_failures: false,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("retrieval.k must be at least 1".into()));
        }
        if let Some(s) = self.min_score {
            if !(-1.0..=1.0).contains(&s) {
                return Err(Error::Config("retrieval.min_score must lie in [-1, 1]".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredEntry {
    pub entry_id: u64,
    pub score: f64,
}

/// Result order: score descending, then larger id first.
fn rank(a: &ScoredEntry, b: &ScoredEntry) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| b.entry_id.cmp(&a.entry_id))
}

/// Heap wrapper ordered so that the worst-ranked candidate sits on top.
struct Candidate(ScoredEntry);

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        rank(&self.0, &other.0) == Ordering::Equal
    }
}
impl Eq for Candidate {}
impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        rank(&self.0, &other.0)
    }
}

/// Exact top-k by cosine similarity over the eligible entries of `state`.
pub fn top_k(state: &MemoryState, query: &[f64], cfg: &RetrievalConfig) -> Result<Vec<ScoredEntry>> {
    if !vector::is_unit(query) {
        return Err(Error::InvalidEmbedding(format!(
            "query has norm {}",
            vector::l2_norm(query)
        )));
    }
    let k = cfg.k.max(1);
    let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
    for e in state.active_entries() {
        if cfg.exclude_failures && e.feedback.outcome == Outcome::Failure {
            continue;
        }
        if e.embedding.len() != query.len() {
            return Err(Error::InvalidEmbedding(format!(
                "query dimension {} does not match entry dimension {}",
                query.len(),
                e.embedding.len()
            )));
        }
        let score = vector::dot(query, &e.embedding).clamp(-1.0, 1.0);
        if cfg.min_score.is_some_and(|m| score < m) {
            continue;
        }
        heap.push(Candidate(ScoredEntry { entry_id: e.id, score }));
        if heap.len() > k {
            heap.pop();
        }
    }
    Ok(heap.into_sorted_vec().into_iter().map(|c| c.0).collect())
}

/// Mean cosine distance of each vector to the normalized centroid of all
/// vectors. Lower means a more coherent task set.
pub fn task_similarity_profile(embeddings: &[Vec<f64>]) -> Result<f64> {
    let first = embeddings
        .first()
        .ok_or_else(|| Error::InvalidInput("similarity profile needs at least one vector".into()))?;
    let dim = first.len();
    let mut centroid = vec![0.0; dim];
    for v in embeddings {
        if v.len() != dim {
            return Err(Error::InvalidEmbedding("mixed dimensions in similarity profile".into()));
        }
        for (c, x) in centroid.iter_mut().zip(v) {
            *c += x;
        }
    }
    let norm = vector::l2_norm(&centroid);
    if norm == 0.0 {
        // vectors cancel out; every cosine to an undefined centre is taken as 0
        return Ok(1.0);
    }
    for c in &mut centroid {
        *c /= norm;
    }
    let total: f64 = embeddings.iter().map(|v| 1.0 - vector::dot(v, &centroid)).sum();
    Ok(total / embeddings.len() as f64)
}
