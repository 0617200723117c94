use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },
    #[error("invalid disparity {0}: must be > 0")]
    InvalidDisparity(f64),
    #[error("invalid depth {0}: must be > 0")]
    InvalidDepth(f64),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("scene error: {0}")]
    Scene(String),
    #[error("mesh error: {0}")]
    Mesh(String),
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("format error: {0}")]
    Format(String),
    #[error("non-finite loss {loss} at stage {stage}, epoch {epoch}")]
    NonFinite { loss: f64, stage: u8, epoch: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
