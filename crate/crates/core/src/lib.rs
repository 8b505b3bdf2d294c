//! Validation compares with negated operators so that NaN fails every range check.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assim;
pub mod cli;
pub mod config;
pub mod engine;
pub mod error;
pub mod experiment;
pub mod hemo;
pub mod model;
pub mod netgen;
pub mod partition;
pub mod rng;

pub use error::{Error, Result};
