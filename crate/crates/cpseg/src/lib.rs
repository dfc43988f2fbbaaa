//! Chain-of-thought language-prompted semantic segmentation on procedurally
//! generated flood scenes.
//!
//! The crate is self-contained: a small f64 autodiff tape ([`tensor`]), text
//! and vision transformer encoders ([`encoders`]), the hierarchical prompt
//! chain controller ([`prompt`]), pixel-text score maps and both losses
//! ([`matching`]), a decoder head ([`decoder`]), the synthetic dataset
//! generator ([`data`]), and the training / evaluation / ablation drivers
//! ([`train`], [`metrics`], [`ablate`]).

pub mod ablate;
pub mod cli;
pub mod data;
pub mod encoders;
pub mod decoder;
pub mod error;
pub mod gradcheck_suite;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod prompt;
pub mod rng;
pub mod train;
pub mod tensor;

pub use error::{CpSegError, Result};
