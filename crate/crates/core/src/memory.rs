//! Memory data model and the evolve policies.
//!
//! A [`MemoryState`] holds every experience a stream has ingested. Entries are
//! never deleted: capacity pressure and prune votes only flip `active` off, so
//! the full history stays inspectable in snapshots.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector;

/// Main runs ingest successes only.
pub const DEFAULT_INGEST_FAILURES: bool = false;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Success,
    Failure,
    Ungraded,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Success => "success",
            Outcome::Failure => "failure",
            Outcome::Ungraded => "ungraded",
        }
    }

    pub fn is_graded(self) -> bool {
        self != Outcome::Ungraded
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Correctness signal for one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub outcome: Outcome,
    pub progress: f64,
    #[serde(default)]
    pub detail: Option<String>,
}

impl Feedback {
    pub fn success() -> Self {
        Self {
            outcome: Outcome::Success,
            progress: 1.0,
            detail: None,
        }
    }

    /// A failed task with partial progress, clamped into `[0, 1]`.
    pub fn failure(progress: f64) -> Self {
        Self {
            outcome: Outcome::Failure,
            progress: progress.clamp(0.0, 1.0),
            detail: None,
        }
    }

    pub fn ungraded(detail: impl Into<String>) -> Self {
        Self {
            outcome: Outcome::Ungraded,
            progress: 0.0,
            detail: Some(detail.into()),
        }
    }

    pub fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = Some(detail.into());
        self
    }

    pub fn is_success(&self) -> bool {
        self.outcome == Outcome::Success
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub id: u64,
    pub task_input: String,
    pub prediction: String,
    pub feedback: Feedback,
    pub rendered: String,
    pub embedding: Vec<f64>,
    pub created_step: u64,
    pub utility: i64,
    pub active: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyTag {
    Baseline,
    History,
    ExpRecent,
    #[serde(rename = "exp_rag")]
    ExpRag,
    #[serde(rename = "remem")]
    ReMem,
}

impl PolicyTag {
    pub const ALL: [PolicyTag; 5] = [
        PolicyTag::Baseline,
        PolicyTag::History,
        PolicyTag::ExpRecent,
        PolicyTag::ExpRag,
        PolicyTag::ReMem,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PolicyTag::Baseline => "baseline",
            PolicyTag::History => "history",
            PolicyTag::ExpRecent => "exp_recent",
            PolicyTag::ExpRag => "exp_rag",
            PolicyTag::ReMem => "remem",
        }
    }

    /// Policies whose reads go through similarity search rather than recency.
    pub fn is_retrieval(self) -> bool {
        matches!(self, PolicyTag::ExpRag | PolicyTag::ReMem)
    }
}

impl fmt::Display for PolicyTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for PolicyTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyTag::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown policy `{s}`")))
    }
}

/// Renders the experience text stored with every entry.
pub fn render_experience(task_input: &str, prediction: &str, feedback: &Feedback) -> Result<String> {
    if task_input.is_empty() {
        return Err(Error::InvalidInput("task input must not be empty".into()));
    }
    Ok(format!(
        "Goal: {task_input}\nTrajectory: {prediction}\nCorrectness: {}",
        feedback.outcome
    ))
}

/// One experience to be written into memory.
#[derive(Debug, Clone)]
pub struct Experience {
    pub task_input: String,
    pub prediction: String,
    pub feedback: Feedback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryState {
    pub policy: PolicyTag,
    pub capacity: Option<usize>,
    pub ingest_failures: bool,
    next_id: u64,
    entries: Vec<MemoryEntry>,
}

impl MemoryState {
    pub fn new(policy: PolicyTag) -> Self {
        Self {
            policy,
            capacity: None,
            ingest_failures: DEFAULT_INGEST_FAILURES,
            next_id: 1,
            entries: Vec::new(),
        }
    }

    pub fn with_capacity(mut self, capacity: Option<usize>) -> Self {
        self.capacity = capacity;
        self
    }

    pub fn with_ingest_failures(mut self, ingest_failures: bool) -> Self {
        self.ingest_failures = ingest_failures;
        self
    }

    /// Rebuilds a state from persisted parts. Ids must be strictly increasing
    /// and below `next_id`.
    pub(crate) fn from_parts(
        policy: PolicyTag,
        capacity: Option<usize>,
        ingest_failures: bool,
        next_id: u64,
        entries: Vec<MemoryEntry>,
    ) -> Result<Self> {
        let mut prev = 0;
        for e in &entries {
            if e.id <= prev || e.id >= next_id {
                return Err(Error::Snapshot(format!("entry id {} out of order", e.id)));
            }
            prev = e.id;
        }
        Ok(Self {
            policy,
            capacity,
            ingest_failures,
            next_id,
            entries,
        })
    }

    pub fn next_id(&self) -> u64 {
        self.next_id
    }

    /// All entries, active or not, in insertion order.
    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn active_entries(&self) -> impl DoubleEndedIterator<Item = &MemoryEntry> {
        self.entries.iter().filter(|e| e.active)
    }

    pub fn active_count(&self) -> usize {
        self.active_entries().count()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: u64) -> Option<&MemoryEntry> {
        // ids are strictly increasing, so a binary search is valid
        self.entries
            .binary_search_by_key(&id, |e| e.id)
            .ok()
            .map(|i| &self.entries[i])
    }

    fn get_mut(&mut self, id: u64) -> Option<&mut MemoryEntry> {
        self.entries
            .binary_search_by_key(&id, |e| e.id)
            .ok()
            .map(move |i| &mut self.entries[i])
    }

    /// Ingests one graded experience according to the policy. Returns the new
    /// entry id, or `None` when the policy declined to store it.
    pub fn evolve(&mut self, exp: Experience, embedding: Vec<f64>, step: u64) -> Result<Option<u64>> {
        if !vector::is_unit(&embedding) {
            return Err(Error::InvalidEmbedding(format!(
                "experience embedding has norm {}",
                vector::l2_norm(&embedding)
            )));
        }
        if let Some(first) = self.entries.first() {
            if first.embedding.len() != embedding.len() {
                return Err(Error::InvalidEmbedding(format!(
                    "dimension {} does not match stored dimension {}",
                    embedding.len(),
                    first.embedding.len()
                )));
            }
        }
        let rendered = render_experience(&exp.task_input, &exp.prediction, &exp.feedback)?;
        if self.policy == PolicyTag::Baseline {
            return Ok(None);
        }
        if exp.feedback.outcome == Outcome::Failure && !self.ingest_failures {
            return Ok(None);
        }

        let id = self.next_id;
        self.next_id += 1;
        self.entries.push(MemoryEntry {
            id,
            task_input: exp.task_input,
            prediction: exp.prediction,
            feedback: exp.feedback,
            rendered,
            embedding,
            created_step: step,
            utility: 0,
            active: true,
        });
        self.enforce_capacity();
        Ok(Some(id))
    }

    fn enforce_capacity(&mut self) {
        let Some(cap) = self.capacity else { return };
        while self.active_count() > cap {
            let victim = if self.policy.is_retrieval() {
                // lowest utility, oldest id on ties
                self.active_entries().min_by_key(|e| (e.utility, e.id)).map(|e| e.id)
            } else {
                self.active_entries().next().map(|e| e.id)
            };
            match victim.and_then(|id| self.get_mut(id)) {
                Some(e) => e.active = false,
                None => break,
            }
        }
    }

    /// The last `n` active entries in insertion order.
    pub fn recent_window(&self, n: usize) -> Vec<&MemoryEntry> {
        let mut out: Vec<&MemoryEntry> = self.entries.iter().rev().filter(|e| e.active).take(n).collect();
        out.reverse();
        out
    }

    /// Rewards entries that were in context when a task succeeded.
    pub fn reward(&mut self, ids: &[u64]) {
        for &id in ids {
            if let Some(e) = self.get_mut(id) {
                e.utility += 1;
            }
        }
    }

    /// Records one prune vote against an entry; deactivates it once its
    /// utility drops to `deactivate_at` or below. Returns whether the entry
    /// was deactivated by this vote.
    pub fn penalize(&mut self, id: u64, deactivate_at: i64) -> bool {
        match self.get_mut(id) {
            Some(e) => {
                e.utility -= 1;
                if e.active && e.utility <= deactivate_at {
                    e.active = false;
                    true
                } else {
                    false
                }
            }
            None => false,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(dim: usize, hot: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[hot % dim] = 1.0;
        v
    }

    fn exp(input: &str, feedback: Feedback) -> Experience {
        Experience {
            task_input: input.into(),
            prediction: "answer".into(),
            feedback,
        }
    }

    #[test]
    fn renders_fixed_template() {
        let s = render_experience("open door", "go north; open door", &Feedback::success()).unwrap();
        assert_eq!(
            s,
            "Goal: open door\nTrajectory: go north; open door\nCorrectness: success"
        );
        let again = render_experience("open door", "go north; open door", &Feedback::success()).unwrap();
        assert_eq!(s.as_bytes(), again.as_bytes());
        assert!(render_experience("q", "a", &Feedback::failure(0.0))
            .unwrap()
            .ends_with("Correctness: failure"));
    }

    #[test]
    fn render_rejects_empty_input() {
        assert!(matches!(
            render_experience("", "x", &Feedback::success()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn baseline_stores_nothing() {
        let mut m = MemoryState::new(PolicyTag::Baseline).with_ingest_failures(true);
        for t in 0..5 {
            assert_eq!(
                m.evolve(exp("q", Feedback::success()), unit(4, t), t as u64).unwrap(),
                None
            );
        }
        assert!(m.is_empty());
    }

    #[test]
    fn append_count_matches_evolve_calls() {
        for policy in [
            PolicyTag::History,
            PolicyTag::ExpRecent,
            PolicyTag::ExpRag,
            PolicyTag::ReMem,
        ] {
            let mut m = MemoryState::new(policy);
            for t in 0..7u64 {
                m.evolve(exp("q", Feedback::success()), unit(4, t as usize), t).unwrap();
                assert_eq!(m.active_count(), t as usize + 1);
            }
        }
    }

    #[test]
    fn failures_filtered_unless_enabled() {
        let mut m = MemoryState::new(PolicyTag::ExpRag);
        assert_eq!(m.evolve(exp("q", Feedback::failure(0.0)), unit(4, 0), 0).unwrap(), None);
        assert_eq!(m.len(), 0);
        let mut m = m.with_ingest_failures(true);
        assert!(m
            .evolve(exp("q", Feedback::failure(0.0)), unit(4, 0), 0)
            .unwrap()
            .is_some());
        assert_eq!(m.len(), 1);
    }

    #[test]
    fn rejects_non_unit_embedding() {
        let mut m = MemoryState::new(PolicyTag::ExpRag);
        let err = m.evolve(exp("q", Feedback::success()), vec![0.5, 0.5], 0).unwrap_err();
        assert!(matches!(err, Error::InvalidEmbedding(_)));
    }

    #[test]
    fn fifo_eviction_for_recency_policies() {
        let mut m = MemoryState::new(PolicyTag::History).with_capacity(Some(2));
        for t in 0..4u64 {
            m.evolve(exp("q", Feedback::success()), unit(4, 0), t).unwrap();
        }
        let active: Vec<u64> = m.active_entries().map(|e| e.id).collect();
        assert_eq!(active, vec![3, 4]);
        assert_eq!(m.len(), 4);
    }

    #[test]
    fn min_utility_eviction_for_retrieval_policies() {
        let mut m = MemoryState::new(PolicyTag::ExpRag).with_capacity(Some(2));
        m.evolve(exp("a", Feedback::success()), unit(4, 0), 0).unwrap();
        m.evolve(exp("b", Feedback::success()), unit(4, 1), 1).unwrap();
        m.reward(&[1]);
        m.evolve(exp("c", Feedback::success()), unit(4, 2), 2).unwrap();
        // entry 2 has utility 0 vs entry 1 at 1; entry 3 is new at 0 but 2 is older
        let active: Vec<u64> = m.active_entries().map(|e| e.id).collect();
        assert_eq!(active, vec![1, 3]);
    }

    #[test]
    fn recent_window_cases() {
        let mut m = MemoryState::new(PolicyTag::ExpRecent);
        assert!(m.recent_window(5).is_empty());
        for t in 0..10u64 {
            m.evolve(exp("q", Feedback::success()), unit(4, 0), t).unwrap();
        }
        let ids: Vec<u64> = m.recent_window(3).iter().map(|e| e.id).collect();
        assert_eq!(ids, vec![8, 9, 10]);

        let mut small = MemoryState::new(PolicyTag::ExpRecent);
        small.evolve(exp("q", Feedback::success()), unit(4, 0), 0).unwrap();
        small.evolve(exp("q", Feedback::success()), unit(4, 0), 1).unwrap();
        assert_eq!(small.recent_window(5).len(), 2);
    }

    #[test]
    fn penalize_deactivates_at_threshold() {
        let mut m = MemoryState::new(PolicyTag::ReMem);
        m.evolve(exp("q", Feedback::success()), unit(4, 0), 0).unwrap();
        assert!(!m.penalize(1, -2));
        assert!(m.penalize(1, -2));
        assert!(!m.get(1).unwrap().active);
        assert_eq!(m.get(1).unwrap().utility, -2);
    }
}
