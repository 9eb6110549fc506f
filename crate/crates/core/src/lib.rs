//! Transmission matrix calibration for multiply-scattering optical systems
//! from intensity-only camera readouts.
//!
//! The pipeline recovers measurement phases by multilateration on the complex
//! plane (anchors localized with classical MDS), then inverts the circulant
//! probe design with FFTs. A simulated optical processing unit stands in for
//! the hardware, and a Wirtinger-flow solver images through the recovered
//! matrix.
//!
//! Module map:
//! - [`opu`]: simulated scattering medium and camera
//! - [`probes`]: binary probe and anchor design, measurement plans
//! - [`geometry`]: per-row anchor localization
//! - [`multilateration`]: measurement phase recovery
//! - [`circulant`] and [`calibrate`]: transmission matrix recovery and merging
//! - [`imaging`]: Wirtinger-flow reconstruction
//! - [`nif`]: matrix file format, sidecars and CSV reports
//! - [`experiment`]: end-to-end calibration, imaging and benchmark runs

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod calibrate;
pub mod circulant;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod imaging;
pub mod multilateration;
pub mod nif;
pub mod opu;
pub mod probes;
mod rng;

pub use error::{Error, Result};
pub use num_complex::Complex64;

/// Row-major complex matrix.
pub type CMatrix = ndarray::Array2<Complex64>;
/// Row-major real matrix.
pub type RMatrix = ndarray::Array2<f64>;
/// Row-major binary matrix; entries are 0 or 1.
pub type BinaryMatrix = ndarray::Array2<u8>;
