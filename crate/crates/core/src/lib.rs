//! Two-scale minimizing-movements simulator for a poroelastic solid immersed
//! in an incompressible fluid, in two space dimensions.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod check;
pub mod cli;
pub mod config;
pub mod dissipation;
pub mod energy;
pub mod error;
pub mod flowmap;
pub mod grid;
pub mod injectivity;
pub mod lbfgs;
pub mod linalg;
pub mod minimizer;
pub mod scheme;
pub mod study;
pub mod toy;

pub use error::{Error, Result};
