//! Adaptive-tiling detection pipeline for small objects.
//!
//! Plans overlapping tile layouts from an object-size prior, runs a
//! grid detector per tile, fuses the per-tile centroid detections in the
//! global frame, trains the detector with a soft-F1 (or BCE) loss, and
//! evaluates detection F1 and count error — all at desk scale on
//! synthetic data.
//!
//! The numeric core (grid predictions, losses, the conv net) is generic
//! over [`Real`]; concrete `f32`/`f64` aliases live at the crate root.

pub mod dataset;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod image;
pub mod pipeline;
pub mod scalar;
pub mod tiling;
pub mod training;

pub use error::{Error, Result};
pub use scalar::Real;

/// Production-path aliases (single precision).
pub type TinyGridNet32 = detector::TinyGridNet<f32>;
pub type GridPrediction32 = detector::GridPrediction<f32>;

/// Verification-path aliases (double precision, used where gradients are
/// checked against finite differences).
pub type TinyGridNet64 = detector::TinyGridNet<f64>;
pub type GridPrediction64 = detector::GridPrediction<f64>;
