//! Numerical laboratory for adaptive gradient methods and their stochastic
//! differential equation approximations.
//!
//! The crate is organised bottom-up:
//!
//! - [`problems`]: loss landscapes with exact gradients and exact noise covariance.
//! - [`ngos`]: noisy gradient oracles (Gaussian, minibatch, SVAG-wrapped) and noise diagnostics.
//! - [`optimizers`]: discrete SGD, RMSprop and Adam, plus the SVAG hyperparameter transform.
//! - [`sde`]: the matching SDE systems, the clamped auxiliary variants and an Euler–Maruyama integrator.
//! - [`moments`]: analytic and Monte-Carlo one-step moments.
//! - [`scaling`]: square-root and linear batch-size scaling rules.
//! - [`harness`]: weak-error measurement, order sweeps, SVAG sweeps and scaling validation.
//! - [`config`] / [`experiment`]: declarative experiment files driving the `adasde` binary.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod error;
pub mod experiment;
pub mod harness;
pub mod linalg;
pub mod moments;
pub mod ngos;
pub mod optimizers;
pub mod problems;
pub mod record;
pub mod scaling;
pub mod sde;
pub mod stats;
pub mod streams;

pub use error::{Error, Result};
