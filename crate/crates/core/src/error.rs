//! Crate-wide error type.

use std::fmt;

/// Result alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// Errors emitted by tensors, networks, regularizers and the maximizer.
///
/// All variants own their data (I/O errors are flattened to strings) so the
/// type stays `Clone` and `PartialEq`, which batch runs and tests rely on.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A tensor constructor received a non-positive dimension or a data
    /// buffer of the wrong length.
    InvalidShape { message: String },
    /// Two tensors that must share a shape do not.
    ShapeMismatch {
        context: &'static str,
        left: [usize; 4],
        right: [usize; 4],
    },
    /// Channel index at or beyond the channel count.
    ChannelOutOfRange { channel: usize, channels: usize },
    /// A layer name that does not exist in the graph.
    UnknownLayer { name: String },
    /// A (layer, channel) pair that does not address a unit.
    UnknownUnit { layer: String, channel: usize },
    /// No calibration entry recorded for the requested unit.
    MissingCalibration { layer: String, channel: usize },
    /// Calibration was asked to run over zero inputs.
    EmptyCalibrationSet,
    /// A layer declaration that cannot be realized (bad hyperparameters,
    /// inconsistent channel counts, unknown predecessor, ...).
    InvalidNetwork { layer: String, message: String },
    /// A configuration value outside its documented domain.
    InvalidConfig { message: String },
    /// A file that does not parse. `offset` is a byte offset for binary
    /// containers, `line` a 1-based line number for text files.
    Format {
        path: String,
        offset: Option<u64>,
        line: Option<usize>,
        message: String,
    },
    /// An operating-system I/O failure, tagged with the path involved.
    Io { path: String, message: String },
    /// An input position whose channel vector lies outside the allowed ball.
    OutsideBall {
        position: (usize, usize, usize),
        norm: f64,
        bound: f64,
    },
    /// A computation produced NaN or infinity where a finite value is required.
    NonFiniteValue { context: String },
    /// The maximization objective became non-finite; carries the per-iteration
    /// traces recorded up to the failing iteration.
    NonFiniteObjective {
        iteration: usize,
        objective_trace: Vec<f64>,
        activation_trace: Vec<f64>,
    },
}

impl Error {
    pub fn io(path: impl Into<String>, err: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            message: err.to_string(),
        }
    }

    pub fn format(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset: None,
            line: None,
            message: message.into(),
        }
    }

    pub fn format_at_offset(
        path: impl Into<String>,
        offset: u64,
        message: impl Into<String>,
    ) -> Self {
        Error::Format {
            path: path.into(),
            offset: Some(offset),
            line: None,
            message: message.into(),
        }
    }

    pub fn format_at_line(path: impl Into<String>, line: usize, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            offset: None,
            line: Some(line),
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Error::InvalidConfig {
            message: message.into(),
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidShape { message } => write!(f, "invalid shape: {message}"),
            Error::ShapeMismatch {
                context,
                left,
                right,
            } => write!(
                f,
                "shape mismatch in {context}: {}x{}x{}x{} vs {}x{}x{}x{}",
                left[0], left[1], left[2], left[3], right[0], right[1], right[2], right[3]
            ),
            Error::ChannelOutOfRange { channel, channels } => {
                write!(f, "channel {channel} out of range (tensor has {channels})")
            }
            Error::UnknownLayer { name } => write!(f, "unknown layer '{name}'"),
            Error::UnknownUnit { layer, channel } => {
                write!(f, "unknown unit {layer}:{channel}")
            }
            Error::MissingCalibration { layer, channel } => {
                write!(f, "no calibration entry for unit {layer}:{channel}")
            }
            Error::EmptyCalibrationSet => write!(f, "calibration requires at least one input"),
            Error::InvalidNetwork { layer, message } => {
                write!(f, "invalid layer '{layer}': {message}")
            }
            Error::InvalidConfig { message } => write!(f, "invalid configuration: {message}"),
            Error::Format {
                path,
                offset,
                line,
                message,
            } => {
                write!(f, "malformed file {path}")?;
                if let Some(off) = offset {
                    write!(f, " at byte {off}")?;
                }
                if let Some(ln) = line {
                    write!(f, " at line {ln}")?;
                }
                write!(f, ": {message}")
            }
            Error::Io { path, message } => write!(f, "i/o error on {path}: {message}"),
            Error::OutsideBall {
                position,
                norm,
                bound,
            } => write!(
                f,
                "channel vector at ({}, {}, {}) has norm {norm} outside the ball of radius {bound}",
                position.0, position.1, position.2
            ),
            Error::NonFiniteValue { context } => {
                write!(f, "non-finite value in {context}")
            }
            Error::NonFiniteObjective { iteration, .. } => {
                write!(f, "objective became non-finite at iteration {iteration}")
            }
        }
    }
}

impl std::error::Error for Error {}
