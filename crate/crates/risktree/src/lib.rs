//! Conditional coherent and generalized deviation risk measures on binary
//! scenario trees, with exact BSDE backends, risk envelopes, continuous-time
//! risk contributions, and a regression Monte Carlo fallback.
//!
//! The exact backend models the Brownian filtration by a non-recombining
//! binary tree with increments `±sqrt(dt)` and equal branch probabilities,
//! on which conditional expectation, martingale representation, Doléans
//! exponentials and backward BSDE induction are all exact in 64-bit floats.

// negated comparisons are deliberate where NaN must fall into the error
// branch; index loops mirror the (level, node) arithmetic of the tree
#![allow(clippy::neg_cmp_op_on_partial_ord)]
#![allow(clippy::needless_range_loop)]

pub mod bsde;
pub mod contribution;
pub mod envelope;
pub mod error;
pub mod market;
pub mod mc;
pub mod measure;
pub mod tree;

pub use error::{Error, Result};
pub use tree::{AdaptedProcess, PredictableProcess, ScenarioTree, TerminalPayoff};
