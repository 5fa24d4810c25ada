//! Gaze-conditioned instance-of-interest segmentation.
//!
//! The crate provides the full pipeline: gaze geometry and gaze maps
//! ([`gaze`]), the saliency-guided differentiable sampler ([`sampler`]), the
//! gaze-aware segmentation model ([`fsnet`]) with its training objective
//! ([`losses`]) and alternating trainer ([`trainer`]), synthetic data and
//! dataset preprocessing ([`data`]), the per-frame skip/reuse/recompute
//! scheduler with analytic FLOP accounting ([`scheduler`], [`flops`]), and
//! the gaze-behavior trace study ([`trace_analysis`]).
//!
//! The numeric core is generic over the scalar type ([`scalar::Real`]);
//! `f32` is the training precision, `f64` backs oracles and gradient checks.

pub mod error;
pub mod rng;
pub mod scalar;

pub mod data;
pub mod flops;
pub mod fsnet;
pub mod gaze;
pub mod losses;
pub mod nn;
pub mod sampler;
pub mod scheduler;
pub mod trace_analysis;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Real;

/// Gaze point at training precision.
pub type GazePoint32 = gaze::GazePoint<f32>;
/// Gaze point at oracle precision.
pub type GazePoint64 = gaze::GazePoint<f64>;
/// Sampling grid at training precision.
pub type SamplingGrid32 = sampler::SamplingGrid<f32>;
/// Sampling grid at oracle precision.
pub type SamplingGrid64 = sampler::SamplingGrid<f64>;
