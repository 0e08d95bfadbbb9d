//! Simulation and statistical verification for piecewise-deterministic
//! Markov processes whose continuous coordinate follows randomly switched
//! semiflows.
//!
//! Modules, bottom up:
//! - [`model`]: hybrid states, metrics, semiflows, jump kernels, observables
//!   and the built-in example models;
//! - [`engine`]: exact simulation of the jump skeleton, interpolation and path
//!   integrals;
//! - [`fm`]: empirical measures and the exact Fortet–Mourier distance;
//! - [`analysis`]: stationary means, the corrector, the martingale
//!   decomposition and the asymptotic variance estimators;
//! - [`hypotheses`]: numerical checkers for the drift/ergodicity hypotheses
//!   and the flow/jump conditions;
//! - [`clt`]: the central-limit statistic and its acceptance tests.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod clt;
pub mod engine;
pub mod error;
pub mod fm;
pub mod hypotheses;
pub mod model;
pub mod rng;
pub mod stats;

pub use error::{Error, Result};
