use thiserror::Error;

use crate::detector::DetectorError;
use crate::geometry::GeometryError;
use crate::masking::MaskError;
use crate::pruning::PruneError;

/// Errors surfaced by the end-to-end operations (inference, certification,
/// evaluation).
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Detector(#[from] DetectorError),
    #[error(transparent)]
    Prune(#[from] PruneError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{0}")]
    Unreachable(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
