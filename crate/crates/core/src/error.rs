//! Error type shared by every module in the crate.
//!
//! Variants are grouped by the kind of failure rather than by module so the
//! command line layer can map them onto exit codes: anything that describes
//! bad input (files, shapes, configuration) is a validation failure, while
//! I/O and training breakdowns are runtime failures.

use std::path::PathBuf;

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, DidError>;

/// All failures the toolkit can report.
#[derive(Debug, Error)]
pub enum DidError {
    /// Underlying I/O failure, annotated with the path involved.
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A wav file that is missing chunks or uses an unsupported encoding.
    #[error("{path}: not a readable wav file: {reason}")]
    Wav { path: PathBuf, reason: String },

    /// A feature file with a bad magic, version or payload.
    #[error("{path}: invalid feature file: {reason}")]
    FeatureFile { path: PathBuf, reason: String },

    /// A model container or sidecar that cannot be used.
    #[error("{path}: invalid model file: {reason}")]
    ModelFile { path: PathBuf, reason: String },

    /// A manifest row that fails validation; `line` is 1-based.
    #[error("{path}:{line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    /// An audio clip too short to cut a single analysis window from.
    #[error("utterance '{utt_id}': {got} samples, need at least {min} for one frame")]
    ClipTooShort {
        utt_id: String,
        got: usize,
        min: usize,
    },

    /// A feature matrix shorter than the network's receptive field.
    #[error("utterance '{utt_id}': {got} frames, network needs at least {min}")]
    UtteranceTooShort {
        utt_id: String,
        got: usize,
        min: usize,
    },

    /// Mismatched tensor or vector shapes inside the numeric kernels.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// An invalid architecture, hyperparameter or corpus description.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A training procedure that cannot proceed (empty data, divergence).
    #[error("training failed: {0}")]
    Training(String),

    /// An evaluation input that cannot be scored (missing references,
    /// degenerate trial sets).
    #[error("evaluation failed: {0}")]
    Eval(String),

    /// `backward` called without a recorded forward pass.
    #[error("backward called before any recorded forward pass")]
    BackwardBeforeForward,
}

impl DidError {
    /// Wraps an I/O error with the path that produced it.
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DidError::Io {
            path: path.into(),
            source,
        }
    }

    /// True when the error describes bad user input rather than a failure
    /// that occurred while acting on valid input.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            DidError::Io { .. } | DidError::Training(_) | DidError::BackwardBeforeForward
        )
    }
}
