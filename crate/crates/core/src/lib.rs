#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Optimal false-data-injection attacks on Kalman-filtered LTI control
//! loops with χ² detection and reactive mitigation.

pub mod artifact;
pub mod attack;
pub mod commands;
pub mod config;
pub mod defense;
pub mod error;
pub mod evaluation;
pub mod lti;
pub mod mdp;
pub mod numerics;
pub mod voltage;

pub use error::{Error, Result};
