//! Cognitive diagnosis with semantic-embedding alignment.
//!
//! Classical and neural diagnosis models (IRT, MIRT, DINA, NCD) trained on
//! student response logs, optionally aligned with text-embedding tables of
//! per-student and per-exercise diagnoses through contrastive
//! (behavioral-space) or masked-reconstruction (semantic-space) objectives.

pub mod alignment;
pub mod cdm;
pub mod cli;
pub mod dataset;
pub mod error;
pub mod llmdiag;
pub mod numerics;
pub mod pipeline;

pub use error::{Error, Result};
