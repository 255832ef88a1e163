//! lethe: a desk-scale laboratory for deleting facts from tiny transformers
//! and then attacking the deletions.
//!
//! The crate trains a small decoder-only transformer to memorize a synthetic
//! fact corpus, "deletes" individual facts with weight-editing defenses,
//! attacks the edited model with whitebox logit-lens probes and blackbox
//! rephrasing, and scores attack success against collateral model damage.
//!
//! The pipeline, end to end:
//!
//! 1. [`factlab`] generates a corpus of (subject, relation, answer) facts
//!    with paraphrase templates, neighbors, and false targets.
//! 2. [`model`] trains a transformer until the corpus is memorized and can
//!    project any intermediate layer onto the vocabulary (the logit lens).
//! 3. [`editor`] applies a deletion objective from [`defense`] with one of
//!    three engines: a closed-form rank-one edit, a multi-layer spread
//!    edit, or max-norm-constrained finetuning.
//! 4. [`attack`] tries to recover the deleted answer within a candidate
//!    budget, from hidden states or by rephrasing the prompt.
//! 5. [`evalkit`] turns the runs into attack-success rates, rewrite scores,
//!    and collateral-damage deltas, written as JSON and CSV reports.
//!
//! The `lethe` binary drives the same stages from a single JSON
//! configuration; see [`pipeline`]. The `book/` directory of the repository
//! walks through each concept with runnable snippets (every snippet in the
//! book compiles as a doc-test of this crate).

pub mod attack;
pub mod defense;
pub mod editor;
pub mod error;
pub mod evalkit;
pub mod factlab;
pub mod model;
pub mod numcore;
pub mod pipeline;
pub mod rng;
pub mod testkit;

mod book;

pub use error::{Error, Result};
