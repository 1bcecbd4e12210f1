//! Penalized least-squares spline estimation on [0, 1] with low-rank
//! approximations built from the kernel eigensystem.
//!
//! The crate is organized around the fitting pipeline:
//!
//! * [`kernels`] — reproducing kernels for the cubic and periodic spline,
//!   their null-space bases, and Gram matrix assembly.
//! * [`eigensys`] — eigensystems of the kernel: analytic for the periodic
//!   spline, grid-approximated otherwise, plus a persistent binary cache.
//! * [`solvers`] — the exact spline solve, low-rank ridge solves (EIGEN,
//!   Nyström, random-subset-of-representers), prediction, and GML selection
//!   of the smoothing parameter.
//! * [`bounds`] — computable upper bounds on the approximation error of the
//!   low-rank estimates, together with the observed errors they control.
//! * [`simbench`] — simulation scenarios, bias/variance/MSE decompositions,
//!   and wall-clock timing sweeps.

// Link the system BLAS/LAPACK backend.
extern crate openblas_src as _openblas;

pub mod bounds;
pub mod eigensys;
mod error;
pub mod kernels;
pub mod linalg;
pub mod simbench;
pub mod solvers;

pub use error::{Error, Result};
