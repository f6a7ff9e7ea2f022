//! Distributionally robust counterfactual risk minimization.
//!
//! Learns stochastic multilabel policies from logged bandit feedback. The
//! crate is organised bottom-up:
//!
//! - [`divergence`]: φ-divergences, closed-form and dual robust risks over a
//!   finite loss sample, and a brute-force primal oracle.
//! - [`policy`]: the factorised exponential policy over label bit-vectors.
//! - [`objectives`]: clipped IPS, sample-variance penalised, and
//!   Boltzmann-reweighted (KL) counterfactual objectives with gradients.
//! - [`optim`]: limited-memory BFGS with a strong Wolfe line search.
//! - [`svmlight`] and [`sim`]: multilabel dataset ingestion and the
//!   supervised-to-bandit conversion protocol.

// `!(x > 0.0)` style guards are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod divergence;
pub mod error;
pub mod objectives;
pub mod optim;
pub mod policy;
pub mod sim;
pub mod svmlight;

pub use error::{Error, Result};
