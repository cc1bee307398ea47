//! Multi-agent pipeline for answering natural-language graph reasoning questions.
//!
//! A question flows through five agents: the question agent extracts the refined
//! problem, graph type, input data and output format; retrieval picks either a stored
//! problem-solving experience or API documentation; the coding agent writes and runs
//! Python with a bounded repair loop, falling back to the reasoning agent; the answer
//! agent reshapes the result to the requested format.

pub mod collect;
pub mod error;
pub mod gateway;
pub mod harness;
pub mod knowledge;
pub mod normalize;
pub mod orchestrator;
pub mod solving;

pub use error::{Error, Result};
