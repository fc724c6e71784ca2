//! Kernel max-sliced Wasserstein distances.
//!
//! The distance between two empirical measures is the largest 2-Wasserstein
//! distance between their one-dimensional pushforwards under unit-norm
//! functions of a reproducing-kernel Hilbert space. Computing it is NP-hard
//! in general; this crate solves a semidefinite relaxation by inexact mirror
//! ascent, reduces the solution to low rank, and extracts a projector. It
//! also provides the two-sample tests built on the distance and the
//! synthetic datasets used to exercise them.

#![allow(clippy::neg_cmp_op_on_partial_ord)] // `!(x > 0.0)` also rejects NaN

pub mod datagen;
pub mod error;
pub mod io;
pub mod kernels;
pub mod kms;
pub mod linalg;
pub mod ot;
pub mod rankred;
pub mod rng;
pub mod sdr;
pub mod stats;

pub use error::{KmsError, Result};
