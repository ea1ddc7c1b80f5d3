//! Multimodal crop-yield regression with intrinsic and post-hoc explainability.
//!
//! Four modality encoders (satellite and weather sequences, soil and terrain
//! statics) are fused by concatenation into a linear regression head. The
//! [`xai`] module explains predictions through attention, gradients and
//! Shapley sampling; [`analysis`] hosts probes, rank statistics and
//! regression trees.

pub mod analysis;
pub mod data;
pub mod encoders;
pub mod error;
pub mod model;
pub mod numgrad;
pub mod training;
pub mod xai;

pub use error::{Error, Result};
