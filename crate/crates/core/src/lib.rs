// `!(x > 0.0)` is used on purpose so that NaN is rejected; index loops touch
// several arrays at once.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod dirichlet;
pub mod energy;
pub mod error;
pub mod extension;
pub mod quadrature;
pub mod space;
pub mod spectral;

pub use error::{Error, Result};
