//! Numerical toolkit for twisted multi-parameter harmonic analysis on the
//! periodic grid `[0, L)^{2m}`.

pub mod error;
pub mod geometry;
pub mod grid;
pub mod kernels;
pub mod numerics;
pub mod operators;
mod spectral;
pub mod stencil;

pub use error::{Error, Result};
