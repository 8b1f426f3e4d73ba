//! Command implementations behind the `crowdadapt` binary.
//!
//! Every command is an ordinary function so integration tests can drive them
//! in-process; `main` only parses arguments and maps [`CliError`] variants to
//! exit codes (1 validation, 2 I/O, 3 verification failure).

pub mod commands;
pub mod gradcheck;

use std::fmt;

#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Io(String),
    Verification(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Validation(msg) => write!(f, "validation error: {msg}"),
            CliError::Io(msg) => write!(f, "io error: {msg}"),
            CliError::Verification(msg) => write!(f, "verification failure: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Io(_) => 2,
            CliError::Verification(_) => 3,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e.to_string())
    }
}

impl From<crowdadapt_core::config::ConfigError> for CliError {
    fn from(e: crowdadapt_core::config::ConfigError) -> Self {
        use crowdadapt_core::config::ConfigError::*;
        match e {
            Io(err) => CliError::Io(err.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<crowdadapt_core::scene::SceneError> for CliError {
    fn from(e: crowdadapt_core::scene::SceneError) -> Self {
        use crowdadapt_core::scene::SceneError::*;
        match e {
            Io(err) => CliError::Io(err.to_string()),
            Malformed { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<crowdadapt_core::persist::PersistError> for CliError {
    fn from(e: crowdadapt_core::persist::PersistError) -> Self {
        use crowdadapt_core::persist::PersistError::*;
        match e {
            Io(err) => CliError::Io(err.to_string()),
            BadMagic { .. } | UnsupportedVersion(_) | Corrupt(_) => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<crowdadapt_core::models::ModelError> for CliError {
    fn from(e: crowdadapt_core::models::ModelError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<crowdadapt_core::train::TrainError> for CliError {
    fn from(e: crowdadapt_core::train::TrainError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<crowdadapt_core::eval::EvalError> for CliError {
    fn from(e: crowdadapt_core::eval::EvalError) -> Self {
        CliError::Validation(e.to_string())
    }
}
