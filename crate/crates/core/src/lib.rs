//! Choice-based conjoint analysis: survey simulation, a hierarchical Bayesian
//! logit fitted with NUTS, willingness-to-pay posteriors and revenue curves.

pub mod domain;
pub mod error;
pub mod infer;
pub mod output;
pub mod posterior;
pub mod revenue;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
