//! Affinity and diversity of in-context-learning demonstrations, measured in
//! the query-key subspace of a model's strongest induction head.
//!
//! Pipeline:
//!
//! 1. [`prompt`] assembles demonstrations and a query into tokens while
//!    tracking label-token spans.
//! 2. [`model`] runs a decoder-only transformer (or [`harness::capture`]
//!    supplies activations exported from a real model).
//! 3. [`probe`] scores heads by attention mass on matching label tokens, picks
//!    the best one, and maps hidden states through `W_Qᵀ W_K`.
//! 4. [`metrics`] computes affinity and diversity; [`retrievers`] provides
//!    BM25 and dense baselines.
//! 5. [`stats`] bins instances and correlates metrics with accuracy;
//!    [`harness`] ties it together and writes reports.

pub mod error;
pub mod harness;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod probe;
pub mod prompt;
pub mod retrievers;
pub mod stats;
pub mod tensor_io;

pub use error::{Error, Result};
