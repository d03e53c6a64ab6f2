//! Attention-sink analysis toolkit.
//!
//! Detects primary and secondary attention sinks in activation traces of
//! decoder-only transformers, groups them into sink levels, and probes how
//! they form and what they do. A built-in toy transformer with planted sinks
//! provides ground truth for every analysis.

pub mod detect;
pub mod effect;
pub mod error;
pub mod formation;
pub mod linalg;
pub mod model;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
