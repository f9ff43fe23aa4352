//! Numerical laboratory for the semilinear heat equation `u_t = Δu + |u|^{p-1}u`:
//! expander profiles, their linearization in similarity variables, colored
//! additive noise, the two-branch construction of distinct solutions from one
//! datum, and Gaussian randomization of initial data on a periodic box.

pub mod branch;
pub mod noise;
pub mod numerics;
pub mod profile;
pub mod randomize;
pub mod rng;
pub mod simvar;
pub mod spectrum;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A parameter falls outside the range where the construction makes sense.
    #[error("parameter gate violated: {0}")]
    Gate(String),
    /// A solver or estimator failed to deliver a trustworthy answer.
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse: {0}")]
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn gate<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Gate(msg.into()))
}

pub(crate) fn numerical<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Numerical(msg.into()))
}
