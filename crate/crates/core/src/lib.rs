//! Mixed quantum-classical particle methods (koopmon, multi-trajectory
//! Ehrenfest, bohmion) for one classical degree of freedom coupled to a
//! two-level system, a split-operator Fourier reference solver, and the
//! diagnostics and run orchestration around them.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::result_large_err)]

pub mod error;
mod par;

pub mod backreaction;
pub mod diagnostics;
pub mod dynamics;
pub mod ensemble;
pub mod models;
pub mod regularization;
pub mod runner;
pub mod sampling;
pub mod soft;

pub use error::{Error, Result};
pub use par::{current_workers, with_workers};
