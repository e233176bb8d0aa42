//! Decentralized cubic-regularized Newton methods over simulated
//! consensus networks.
//!
//! The crate provides:
//! - local objective oracles and problem suites ([`objectives`]),
//! - time-varying mixing schedules with Metropolis weights and Chebyshev
//!   acceleration ([`network`]),
//! - a deterministic consensus engine with round planning ([`consensus`]),
//! - the cubic-model and estimating-function solvers ([`cubic`]),
//! - the basic and accelerated decentralized drivers ([`dcn`], [`adcn`]),
//! - the GLM weight-vector Hessian exchange ([`glm_comm`]),
//! - experiment orchestration, traces, and the CLI surface ([`harness`]).

pub mod adcn;
pub mod consensus;
pub mod cubic;
pub mod dcn;
pub mod error;
pub mod glm_comm;
pub mod harness;
pub mod linalg;
pub mod network;
pub mod objectives;
pub mod parallel;

pub use error::{Error, Result};
