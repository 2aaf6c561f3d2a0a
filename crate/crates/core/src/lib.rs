//! Bayesian tree ensembles for heterogeneous effects of a continuous exposure.
//!
//! The outcome model is `y = μ(x_C) + τ(x_M)·z + ε`, with `μ` and `τ` each a
//! sum of regression trees. [`sampler`] draws from the posterior; the
//! remaining modules turn draws into effect estimates, projection summaries
//! and a linearity diagnostic.

pub mod artifacts;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod estimands;
pub mod par;
pub mod sampler;
pub mod simulation;
pub mod stats;
pub mod summaries;
pub mod trees;

pub use error::{Error, ErrorKind, Result};
