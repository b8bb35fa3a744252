//! Feed-forward key/value analysis for decoder-only code models.
//!
//! The crate bundles a small instrumented transformer, a weight file format,
//! a code-corpus pipeline, top-t trigger extraction per FF key, regex-based
//! concept analysis, key masking with accuracy evaluation, and logit-lens
//! agreement analysis.

pub mod agreement;
pub mod concept;
pub mod corpus;
pub mod editor;
pub mod error;
pub mod model;
pub mod probe;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod weight_io;

pub use error::{Error, Result};
