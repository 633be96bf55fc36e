//! JSON Lines persistence for memory states.
//!
//! Line 1 is a header carrying the policy settings and the entry count;
//! every following line is one [`MemoryEntry`]. The count lets a truncated
//! file be detected.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::{render_experience, MemoryEntry, MemoryState, PolicyTag};
use crate::vector;

pub const SNAPSHOT_FORMAT: &str = "memloop.memory";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    policy: PolicyTag,
    capacity: Option<usize>,
    ingest_failures: bool,
    next_id: u64,
    entries: usize,
}

pub fn to_jsonl(state: &MemoryState) -> Result<String> {
    let header = Header {
        format: SNAPSHOT_FORMAT.into(),
        version: SNAPSHOT_VERSION,
        policy: state.policy,
        capacity: state.capacity,
        ingest_failures: state.ingest_failures,
        next_id: state.next_id(),
        entries: state.len(),
    };
    let mut out = serde_json::to_string(&header)?;
    out.push('\n');
    for e in state.entries() {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn from_jsonl(text: &str) -> Result<MemoryState> {
    let mut lines = text.lines();
    let header: Header = match lines.next() {
        Some(l) => serde_json::from_str(l).map_err(|e| Error::Snapshot(format!("bad header: {e}")))?,
        None => return Err(Error::Snapshot("empty snapshot file".into())),
    };
    if header.format != SNAPSHOT_FORMAT || header.version != SNAPSHOT_VERSION {
        return Err(Error::Snapshot(format!(
            "unsupported snapshot {} v{}",
            header.format, header.version
        )));
    }
    if !text.ends_with('\n') {
        return Err(Error::Snapshot("snapshot does not end with a newline".into()));
    }
    let mut entries = Vec::with_capacity(header.entries);
    for (n, line) in lines.enumerate() {
        let e: MemoryEntry =
            serde_json::from_str(line).map_err(|err| Error::Snapshot(format!("entry line {}: {err}", n + 2)))?;
        if !vector::is_unit(&e.embedding) {
            return Err(Error::Snapshot(format!("entry {} has a non-unit embedding", e.id)));
        }
        let expected = render_experience(&e.task_input, &e.prediction, &e.feedback)
            .map_err(|err| Error::Snapshot(format!("entry {}: {err}", e.id)))?;
        if expected != e.rendered {
            return Err(Error::Snapshot(format!(
                "entry {} rendered text does not match its fields",
                e.id
            )));
        }
        entries.push(e);
    }
    if entries.len() != header.entries {
        return Err(Error::Snapshot(format!(
            "header promises {} entries, found {}",
            header.entries,
            entries.len()
        )));
    }
    MemoryState::from_parts(
        header.policy,
        header.capacity,
        header.ingest_failures,
        header.next_id,
        entries,
    )
}

/// Writes atomically via a sibling temp file.
pub fn save(state: &MemoryState, path: &Path) -> Result<()> {
    write_atomic(path, to_jsonl(state)?.as_bytes())
}

pub fn load(path: &Path) -> Result<MemoryState> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_jsonl(&text)
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::{Experience, Feedback};

    fn state(n: usize) -> MemoryState {
        let mut m = MemoryState::new(PolicyTag::ExpRag).with_ingest_failures(true);
        for t in 0..n {
            let v = vector::normalize(vec![1.0 + t as f64, 0.3, -0.7 * t as f64]);
            let fb = if t % 3 == 0 {
                Feedback::failure(0.25)
            } else {
                Feedback::success()
            };
            let exp = Experience {
                task_input: format!("task \"{t}\"\nline two"),
                prediction: format!("pred {t}"),
                feedback: fb,
            };
            m.evolve(exp, v, t as u64).unwrap();
        }
        m.reward(&[2]);
        m
    }

    #[test]
    fn round_trip_is_lossless() {
        let m = state(100);
        let text = to_jsonl(&m).unwrap();
        let back = from_jsonl(&text).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_jsonl(&back).unwrap(), text);
    }

    #[test]
    fn empty_state_has_header_only() {
        let m = MemoryState::new(PolicyTag::ReMem);
        let text = to_jsonl(&m).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(from_jsonl(&text).unwrap(), m);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let text = to_jsonl(&state(10)).unwrap();
        let cut = &text[..text.len() - 40];
        assert!(matches!(from_jsonl(cut), Err(Error::Snapshot(_))));
        let dropped: String = text.lines().take(5).map(|l| format!("{l}\n")).collect();
        assert!(matches!(from_jsonl(&dropped), Err(Error::Snapshot(_))));
        assert!(matches!(from_jsonl(""), Err(Error::Snapshot(_))));
    }

    #[test]
    fn tampered_rendering_is_rejected() {
        let text = to_jsonl(&state(3))
            .unwrap()
            .replace("Correctness: success", "Correctness: failure");
        assert!(matches!(from_jsonl(&text), Err(Error::Snapshot(_))));
    }
}
