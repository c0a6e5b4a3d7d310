//! Early-cycle battery degradation trajectory forecasting.
//!
//! The crate covers the whole pipeline: raw per-cycle records
//! ([`record`]), cleaning and SOC-aligned input construction
//! ([`preprocess`]), a synthetic record generator ([`synth`]), the
//! dual-view encoder / condition-aware decoder / pattern-memory forecaster
//! ([`model`]), training ([`train`]) and evaluation ([`eval`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod embedder;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod memory;
pub mod model;
pub mod nn;
pub mod optim;
pub mod parallel;
pub mod preprocess;
pub mod record;
pub mod synth;
pub mod train;

pub use config::{ModelConfig, Variant};
pub use error::{Error, Result};
