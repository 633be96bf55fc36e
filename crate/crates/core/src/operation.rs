//! Strict parser for agent outputs: `Think-Prune:`, `Think:` and `Action:`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper bound on a single display index; anything larger cannot refer to a
/// retrieved experience and is rejected before expanding ranges.
pub const MAX_DISPLAY_INDEX: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum AgentOperation {
    Think(String),
    Prune(BTreeSet<usize>),
    Act(String),
}

impl AgentOperation {
    pub fn is_act(&self) -> bool {
        matches!(self, AgentOperation::Act(_))
    }

    /// Rejects prunes that reference indices outside `1..=working_len`.
    pub fn validate(&self, working_len: usize) -> Result<()> {
        if let AgentOperation::Prune(ids) = self {
            if ids.is_empty() {
                return Err(Error::InvalidPrune("empty id set".into()));
            }
            if let Some(bad) = ids.iter().find(|&&i| i == 0 || i > working_len) {
                return Err(Error::InvalidPrune(format!("index {bad} outside 1..={working_len}")));
            }
        }
        Ok(())
    }
}

/// Renders the operation the way the agent would have written it.
impl fmt::Display for AgentOperation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentOperation::Think(t) => write!(f, "Think: {t}"),
            AgentOperation::Act(a) => write!(f, "Action: {a}"),
            AgentOperation::Prune(ids) => {
                let list: Vec<String> = ids.iter().map(|i| i.to_string()).collect();
                write!(f, "Think-Prune: {}", list.join(","))
            }
        }
    }
}

fn strip_prefix_ignore_case<'a>(s: &'a str, prefix: &str) -> Option<&'a str> {
    let head = s.get(..prefix.len())?;
    head.eq_ignore_ascii_case(prefix).then(|| &s[prefix.len()..])
}

fn parse_index(s: &str) -> Result<usize> {
    let s = s.trim();
    if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::MalformedOperation(format!("bad prune id `{s}`")));
    }
    match s.parse::<usize>() {
        Ok(0) => Err(Error::MalformedOperation("prune ids start at 1".into())),
        Ok(n) if n <= MAX_DISPLAY_INDEX => Ok(n),
        _ => Err(Error::MalformedOperation(format!("prune id `{s}` too large"))),
    }
}

/// Parses comma lists with dash ranges: `1,3`, `2-4`, `1,3-5`.
pub fn parse_prune_ids(spec: &str) -> Result<BTreeSet<usize>> {
    let mut ids = BTreeSet::new();
    for part in spec.split(',') {
        match part.split_once('-') {
            Some((lo, hi)) => {
                let (lo, hi) = (parse_index(lo)?, parse_index(hi)?);
                if lo > hi {
                    return Err(Error::MalformedOperation(format!("descending range {lo}-{hi}")));
                }
                ids.extend(lo..=hi);
            }
            None => {
                ids.insert(parse_index(part)?);
            }
        }
    }
    Ok(ids)
}

/// Parses one raw completion. The first non-empty line decides the kind;
/// `Think` and `Action` payloads run to the end of the text.
pub fn parse_operation(raw: &str) -> Result<AgentOperation> {
    let start = raw
        .char_indices()
        .find(|(_, c)| !c.is_whitespace())
        .map(|(i, _)| i)
        .ok_or_else(|| Error::MalformedOperation("empty output".into()))?;
    let text = &raw[start..];
    if let Some(rest) = strip_prefix_ignore_case(text, "Think-Prune:") {
        let line = rest.lines().next().unwrap_or("");
        return parse_prune_ids(line).map(AgentOperation::Prune);
    }
    if let Some(rest) = strip_prefix_ignore_case(text, "Think:") {
        return Ok(AgentOperation::Think(rest.trim().to_string()));
    }
    if let Some(rest) = strip_prefix_ignore_case(text, "Action:") {
        return Ok(AgentOperation::Act(rest.trim().to_string()));
    }
    let first = text.lines().next().unwrap_or("");
    Err(Error::MalformedOperation(format!("no recognized prefix in `{first}`")))
}
