//! Composite empirical likelihood: estimation, asymptotic inference and the
//! simulation studies built on them.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod error;
mod linalg;

pub mod asymptotics;
pub mod composite;
pub mod config;
pub mod harness;
pub mod inference;
pub mod inner_el;
pub mod model;
pub mod simgen;

pub use error::{CelError, Result};
pub use linalg::MAX_CONDITION;
