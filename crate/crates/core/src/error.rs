use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    Shape { expected: Vec<usize>, got: Vec<usize> },

    #[error("loss must have exactly one element, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("near-singular threshold conversion: denominator {0:e}")]
    Singular(f64),

    #[error("missing artifact: {}", .0.display())]
    MissingArtifact(PathBuf),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("codec reconstruction PSNR {psnr:.2} dB is below the {floor:.2} dB floor")]
    Untrained { psnr: f64, floor: f64 },

    #[error("malformed blob: {0}")]
    Format(String),

    #[error("output directory {} already exists (pass --overwrite)", .0.display())]
    OutputExists(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(expected: &[usize], got: &[usize]) -> Self {
        Error::Shape { expected: expected.to_vec(), got: got.to_vec() }
    }
}
