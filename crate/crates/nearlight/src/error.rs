//! Error type shared across the crate.

use std::path::PathBuf;

/// Crate-wide error type.
///
/// `Argument` marks caller mistakes (bad flag combinations, mismatched
/// dimensions); everything else is a domain or I/O failure encountered while
/// doing otherwise-valid work. The CLI maps `Argument` and usage problems to
/// exit code 2 and the rest to exit code 1.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Invalid argument or inconsistent inputs supplied by the caller.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// A computation failed for data-dependent reasons (rank deficiency,
    /// divergence, empty masks, ...).
    #[error("{0}")]
    Domain(String),

    /// A file had the wrong format or failed validation.
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// Training aborted because the loss stopped decreasing and rose above
    /// its initial level for several consecutive epochs.
    #[error("training diverged after {epochs} epochs (initial loss {initial:.6}, last {last:.6})")]
    Diverged {
        epochs: usize,
        initial: f64,
        last: f64,
    },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    /// Convenience constructor for `Error::Argument`.
    pub fn arg(msg: impl Into<String>) -> Self {
        Error::Argument(msg.into())
    }

    /// Convenience constructor for `Error::Domain`.
    pub fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    /// Convenience constructor for `Error::Parse`.
    pub fn parse(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
