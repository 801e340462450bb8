//! Toolkit for synthesizing physically-triggered backdoor image datasets,
//! training classifiers on them, and auditing the result.
//!
//! The pipeline runs trigger suggestion, trigger generation and poison
//! selection, followed by assembly, training, attack metrics and a defense
//! suite. Heavyweight models (VQA, image editing,
//! text-to-image, preference scoring) sit behind backend traits;
//! deterministic synthetic stand-ins in [`fixtures`] make the full loop
//! runnable at desk scale.

pub mod assemble;
pub mod defense;
pub mod error;
pub mod eval;
pub mod fixtures;
pub mod generate;
pub mod imgio;
pub mod manifest;
pub mod nn;
pub mod pipeline;
pub mod plot;
pub mod select;
pub mod suggest;
pub mod trainer;
pub mod util;

pub use error::{Error, Result};
