//! Construction and orchestration harness for multi-needle long-context
//! reasoning benchmarks.
//!
//! The library covers the full experiment loop:
//!
//! - [`corpus`]: ingestion of multi-hop QA sources (two supporting
//!   passages, eight distractors per item) and the filler-essay corpus;
//! - [`tokenizer`]: deterministic token counting, offsets and truncation;
//! - [`taskgen`]: context assembly at a target token length under
//!   even-random, depth-controlled and distance-controlled placement;
//! - [`llm`]: a cached, retrying client for chat endpoints with the fixed
//!   decoding presets, plus scripted offline transports;
//! - [`evaluation`]: judge-based grading, memory-answer filtering,
//!   accuracy aggregation, thinking-length measurement and pass@1;
//! - [`fourr`]: the iterated retrieve → reason → reflect loop;
//! - [`traindata`]: fine-tuning dataset synthesis from two-round traces;
//! - [`mathapp`]: solution generation/extraction scoring for contest math;
//! - [`runstore`]: the append-only record store behind caching and resume.
//!
//! Every run is reproducible: sampling is seed-driven, model calls are
//! cached by content digest, and reruns replay completions byte for byte.
//! The `examples/` directory holds one runnable program per capability;
//! all of them work offline against the scripted model in
//! [`llm::mock::offline_model`].

pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod fixtures;
pub mod fourr;
pub mod llm;
pub mod mathapp;
pub mod prompts;
pub mod runstore;
pub mod taskgen;
pub mod tokenizer;
pub mod traindata;

pub use error::{Classify, ErrorClass};
