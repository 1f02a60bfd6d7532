#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anomaly;
pub mod approx;
pub mod backstep;
pub mod config;
pub mod error;
pub mod expr;
pub mod plant;
pub mod resilience;
pub mod scenario;
pub mod sim;

pub use error::{Error, Result};
