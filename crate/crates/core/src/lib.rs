//! Nonparametric maximum likelihood estimation of mixing distributions by
//! the penalized dual method, with EM baselines and sieve sweeps.

pub mod builder;
pub mod cli;
pub mod data;
pub mod datasets;
pub mod density;
pub mod dual;
pub mod em;
pub mod error;
pub mod oracle;
pub mod par;
pub mod problem;
pub mod recovery;
pub mod synthetic;
pub mod tables;

pub use error::{Error, Result};
