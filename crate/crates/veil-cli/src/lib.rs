//! Workbench around the veil library: fit the built-in example models on
//! CSV or synthetic data, persist and reload fitted state, and produce
//! posterior-predictive and calibration reports. All outputs are
//! deterministic functions of the resolved configuration and seed.

pub mod commands;
pub mod config;
pub mod data;
pub mod models;
pub mod report;

use std::fmt;

/// Workbench failure, split by exit code: configuration problems exit 2,
/// data and artifact problems exit 3, numerical aborts exit 4.
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<veil::Error> for CliError {
    fn from(e: veil::Error) -> CliError {
        match e {
            veil::Error::NonFiniteLoss(_)
            | veil::Error::NonFiniteTerm { .. }
            | veil::Error::DegenerateGuide { .. }
            | veil::Error::MissingGrad(_) => CliError::Numerical(e.to_string()),
            veil::Error::Io(_)
            | veil::Error::Json(_)
            | veil::Error::TensorFormat(_)
            | veil::Error::Manifest(_) => CliError::Data(e.to_string()),
            other => CliError::Config(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Data(e.to_string())
    }
}
