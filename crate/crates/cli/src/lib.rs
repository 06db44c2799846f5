//! Experiment front end for the hessfree training engine: flag/config
//! resolution, run directories with manifest + metrics CSV, and one-axis
//! sweeps. Kept as a library so the integration tests can drive the same
//! code paths the binary does.

pub mod manifest;
pub mod runner;

use thiserror::Error;

/// CLI failure classes, one per exit code: usage 2, I/O 3, numeric 4.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Io(hessfree::Error),

    /// The optimizer aborted (non-finite values, degenerate directions,
    /// ...). Metrics flushed before the abort are kept.
    #[error("{0}")]
    Numeric(hessfree::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Io(_) => 3,
            CliError::Numeric(_) => 4,
        }
    }
}

/// Sorts a core error into the CLI's exit-code classes: file trouble is
/// I/O, bad configuration is usage, everything else is a numeric abort.
pub(crate) fn classify(e: hessfree::Error) -> CliError {
    use hessfree::Error as E;
    match e {
        E::Io { .. } | E::Format { .. } => CliError::Io(e),
        E::InvalidConfig(_) | E::InvalidSpec(_) => CliError::Usage(e.to_string()),
        other => CliError::Numeric(other),
    }
}
