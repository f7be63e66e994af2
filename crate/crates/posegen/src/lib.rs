//! Pose-conditioned person image synthesis in two stages, on CPU.
//!
//! Stage one integrates a condition image with a target pose (encoded as
//! binary keypoint heatmaps) through a U-Net-like generator trained with a
//! pose-masked L1 loss. Stage two trains a second U-Net adversarially to
//! produce a difference map that sharpens the coarse result. The crate also
//! ships the ablation baselines (coordinate and heatmap pose embeddings, a
//! one-stage adversarial model), SSIM / Inception-Score style metrics with
//! masked variants, and a synthetic stick-figure dataset generator so the
//! whole pipeline trains and evaluates on a desk in minutes.
//!
//! See the `examples/` directory for one runnable program per capability,
//! and the `posegen` binary for the end-to-end command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod graph;
pub mod img;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod optim;
pub mod pose;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
