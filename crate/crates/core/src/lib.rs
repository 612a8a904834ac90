// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod evaluation;
pub mod flow;
pub mod lagrangian;
pub mod ode;
pub mod pseudospectral;

pub use error::{AghfError, Result};
