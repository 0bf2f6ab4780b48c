//! Rotation-invariant watermarking of spherical panoramas.
//!
//! Payload bits are written into selected spherical-harmonic degrees of an
//! equirectangular image and read back from third-order (bispectrum)
//! invariants, which do not change under any rotation of the sphere.

pub mod attacks;
pub mod cli;
pub mod codec;
pub mod coupling;
pub mod decoder;
pub mod error;
pub mod grid;
pub mod harmonics;
pub mod io;
pub mod metrics;
pub mod so3;

pub use error::{Error, Result};
