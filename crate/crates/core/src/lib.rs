// `!(x > 0.0)` is used on purpose so that NaN fails parameter checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod covariance;
pub mod error;
pub mod fdr;
pub mod forecast;
pub mod inference;
pub mod io;
pub mod linalg;
pub mod projection;
pub mod rng;
pub mod simulation;
pub mod spectest;
pub mod weights;

pub use error::{Error, Result};
