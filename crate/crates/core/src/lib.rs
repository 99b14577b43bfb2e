//! Plug-and-play consistency-model (PnP-CM) channel estimation for
//! pilot-aided MIMO links.
//!
//! The crate is organised along the estimation pipeline:
//!
//! - [`channel`]: geometric multipath channels on uniform planar arrays, DFT
//!   dictionaries and the spatial/angular transforms.
//! - [`measurement`]: quantized pilot and combiner codebooks, the Kronecker
//!   measurement operator and noisy observations.
//! - [`solver`]: the regularized normal-equation solve behind the
//!   data-consistency step (conjugate gradient plus an exact Kronecker
//!   eigen-solver).
//! - [`cm`]: the consistency-model prior, its convolutional backbone and
//!   independent consistency training.
//! - [`denoiser`]: the complex-vector/two-channel bridge and the denoisers the
//!   PnP loop can call.
//! - [`pnp`]: reverse-indexed PnP-ADMM with active noising and momentum.
//! - [`harness`]: seeded experiment sweeps, NMSE aggregation and reports.

pub mod channel;
pub mod cm;
pub mod denoiser;
mod error;
pub mod harness;
pub mod measurement;
pub mod pnp;
pub mod rng;
pub mod solver;

pub use error::{Error, Result};

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

/// Dense complex matrix (column-major storage).
pub type CMat = DMatrix<Complex64>;
/// Dense complex vector.
pub type CVec = DVector<Complex64>;

/// Column-major `vec(·)`.
pub fn vec_col_major(m: &CMat) -> CVec {
    CVec::from_column_slice(m.as_slice())
}

/// Inverse of [`vec_col_major`].
pub fn unvec_col_major(v: &CVec, rows: usize, cols: usize) -> Result<CMat> {
    error::check_dims("unvec", rows * cols, v.len())?;
    Ok(CMat::from_column_slice(rows, cols, v.as_slice()))
}
