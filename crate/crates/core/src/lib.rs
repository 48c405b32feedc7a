//! Adversarial co-training of a fake-news rewriter and a retrieval-augmented
//! detector.
//!
//! Each round the generator rewrites a fixed set of real articles, the
//! detector scores the rewrites (optionally with retrieved evidence) and emits
//! structured verbal feedback, and both models are updated. Every model sits
//! behind a backend trait; deterministic stubs in [`backends`] make the whole
//! pipeline runnable and testable without weights.

pub mod backends;
pub mod cli;
pub mod corpus;
pub mod detector;
pub mod eval;
pub mod exec;
pub mod generator;
pub mod prompts;
pub mod retrieval;
pub mod text;
pub mod training;
pub mod vaf;

pub use corpus::{Article, CorpusStore, Label, Split};
pub use exec::Exec;
