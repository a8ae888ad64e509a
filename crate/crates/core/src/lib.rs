//! Segment-level temporal action segmentation.
//!
//! The crate covers the label data model ([`segcore`]), evaluation
//! ([`metrics`]), timestamp pseudo-labeling ([`pseudolabel`]), training losses
//! ([`losses`]), a small encoder / transcript decoder / alignment decoder
//! transformer with exact gradients ([`model`]), transcript-constrained
//! duration inference ([`align`]), a synthetic video generator ([`synth`]) and
//! the on-disk formats shared with the command-line tool ([`io`]).

pub mod align;
pub mod error;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pseudolabel;
pub mod segcore;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
