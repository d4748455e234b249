//! Demonstration selection, rule-based retrieval, evaluation metrics and a
//! reference prototype-modulation module for multimodal in-context learning.

pub mod capm;
pub mod episode;
pub mod fusion;
pub mod intent;
pub mod linalg;
pub mod metrics;
