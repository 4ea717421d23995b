//! Desk-scale workbench for adaptive lookahead scheduling in streaming
//! transformer encoders.
//!
//! The crate bundles a minimal reverse-mode autodiff engine, the attention
//! mask families used by streaming encoders (causal, layerwise, chunked,
//! full-context, and learned adaptive schedulers), a dependency dynamic
//! program over the attention compute DAG with independent shortest-path and
//! discrete-event oracles, three differentiable latency regularizers, a small
//! transformer encoder trained jointly with those regularizers, a synthetic
//! streaming task with known optimal latency, and reporting utilities.

pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod gradcheck;
pub mod latency;
pub mod masks;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod seeds;
pub mod tape;
pub mod tensor;

use std::fmt;

/// Error type for the I/O and configuration surfaces of the crate.
///
/// Numeric-contract violations (shape mismatches, non-finite values, masked
/// rows with no unmasked entry, ...) panic with a diagnostic instead: they
/// indicate a bug in the caller, not a recoverable condition.
#[derive(Debug)]
pub enum Error {
    Io(std::io::Error),
    Json(serde_json::Error),
    Config(String),
    Data(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Json(e) => write!(f, "json error: {e}"),
            Error::Config(m) => write!(f, "config error: {m}"),
            Error::Data(m) => write!(f, "data error: {m}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            Error::Json(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
