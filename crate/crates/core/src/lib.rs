//! Space-time video super-resolution operator library.
//!
//! Given two low-resolution frames, an arbitrary intermediate time
//! `t ∈ [0, 1]` and an arbitrary spatial scale `s ∈ [1, 4]`, the library
//! synthesizes the intermediate high-resolution frame. The pipeline is
//! built from four stages: flow-based frame interpolation ([`motion`]),
//! shared feature extraction and feature-level enhancement ([`net`]),
//! and a reconstruction trunk whose upsampling head is a generalized
//! pixelshuffle layer that accepts fractional scale factors ([`gpl`]).
//!
//! All differentiable operators run on a small reverse-mode tape
//! ([`tensor::graph`]) and are verified against central finite
//! differences ([`tensor::gradcheck`]). A desk-scale training harness
//! ([`training`]) fits the model on synthetic or directory datasets.

pub mod blocks;
pub mod gpl;
pub mod gradsuite;
pub mod imaging;
pub mod losses;
pub mod motion;
pub mod net;
pub mod params;
pub mod tensor;
pub mod training;

use std::path::PathBuf;

/// Errors produced by library operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor or frame shapes are inconsistent with the operation.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// A configuration value is invalid (bad channel counts, kernel size, ...).
    #[error("invalid configuration: {0}")]
    Config(String),
    /// The caller violated an operation precondition.
    #[error("usage error: {0}")]
    Usage(String),
    /// Filesystem I/O failed; the path gives context.
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Image decode/encode failed; the path gives context.
    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    /// A binary file does not match its documented layout.
    #[error("format error: {0}")]
    Format(String),
    /// Training aborted (non-finite loss or similar).
    #[error("training aborted: {0}")]
    Training(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
