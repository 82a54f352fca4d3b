//! Balancing weights for average treatment effects on the treated in
//! clustered observational data.
//!
//! The crate covers the full pipeline: loading and validating a clustered
//! dataset ([`data`]), building unit-level features, cluster sufficient
//! statistics and their interactions ([`features`]), solving the balancing
//! quadratic programs ([`qp`]), constructing control weights under several
//! methods ([`estimators`]), balance diagnostics ([`diagnostics`]), effect
//! estimation with variance and intervals ([`inference`]), and a Monte Carlo
//! harness ([`simulation`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod data;
pub mod diagnostics;
pub mod error;
pub mod estimators;
pub mod features;
pub mod fmt;
pub mod inference;
pub mod qp;
pub mod simulation;

pub use error::{Error, Result};
