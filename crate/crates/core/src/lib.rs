//! Knowledge sanitization for small decoder-only language models.
//!
//! A model is pretrained on a synthetic factual corpus, then tuned with
//! low-rank adapters so that questions about a chosen subset of facts are
//! answered with a refusal phrase while other facts are kept. Baselines,
//! evaluation metrics and extraction attacks live alongside.

pub mod adapters;
pub mod datasets;
pub mod eval;
pub mod experiment;
pub mod methods;
mod error;
pub mod model;
pub mod numerics;

pub use error::{Error, Result};
