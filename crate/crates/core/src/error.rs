//! Error type shared across the crate.

use std::fmt;

/// Errors produced by model construction, solving, and simulation.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An argument fell outside its documented domain.
    Domain(String),
    /// A configuration value is inconsistent with the model.
    Config(String),
    /// The workload saturates the server: `rho >= 1`.
    Saturated { rho: f64 },
    /// Least-squares profile fitting failed.
    Fit(String),
    /// The policy-induced chain has several recurrent classes, listed by
    /// their state indices.
    ReducibleChain { classes: Vec<Vec<usize>> },
    /// A numerical routine failed to reach its tolerance.
    Numerical(String),
    /// A simulation run tripped the queue blow-up guard.
    SimulationDiverged { at_ms: f64, queue_len: usize },
    /// File I/O or parsing of profiles and policies.
    Parse(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Domain(msg) => write!(f, "domain error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Saturated { rho } => write!(
                f,
                "unstable workload: rho = {rho} but stability requires rho < 1"
            ),
            Error::Fit(msg) => write!(f, "fit error: {msg}"),
            Error::ReducibleChain { classes } => {
                write!(f, "chain is reducible with recurrent classes: ")?;
                for (i, class) in classes.iter().enumerate() {
                    if i > 0 {
                        write!(f, ", ")?;
                    }
                    write!(f, "{class:?}")?;
                }
                Ok(())
            }
            Error::Numerical(msg) => write!(f, "numerical error: {msg}"),
            Error::SimulationDiverged { at_ms, queue_len } => write!(
                f,
                "simulation diverged at t = {at_ms} ms with queue length {queue_len}"
            ),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
        }
    }
}

impl std::error::Error for Error {}
