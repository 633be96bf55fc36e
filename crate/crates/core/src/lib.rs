//! Runtime and evaluation harness for self-evolving agent memory.
//!
//! The pieces compose into a search / synthesize / evolve loop: a task input
//! is embedded, similar past experiences are retrieved from a
//! [`memory::MemoryState`], a backend model produces a prediction (either in
//! one shot or through the Think / Refine / Act [`agent`] loop), the
//! environment grades it, and the graded experience is written back.

pub mod agent;
pub mod backends;
pub mod config;
pub mod environments;
pub mod error;
pub mod harness;
pub mod memory;
pub mod metrics;
pub mod operation;
pub mod prompt;
pub mod retrieval;
pub mod snapshot;
pub mod vector;

pub use error::{Error, Result};
