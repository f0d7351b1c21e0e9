use alloc::string::String;

/// Errors produced by the registration core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("rotation angle {angle} is too close to pi for a unique logarithm")]
    AngleNearPi { angle: f64 },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("mesh has no face with positive area")]
    EmptyMesh,
    #[error("degenerate point cloud: {0}")]
    DegenerateCloud(&'static str),
    #[error("too few points: need more than {needed}, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("zero-length vector in {0}")]
    ZeroVector(&'static str),
    #[error("backward requires a scalar loss, got {len} elements")]
    NonScalarLoss { len: usize },
    #[error("missing gradient for parameter `{0}`")]
    MissingGrad(String),
    #[error("predicted normal has (near) zero length")]
    DegenerateNormal,
    #[error("point cloud carries no normals")]
    MissingNormals,
    #[error("damped normal matrix is not positive definite")]
    SingularSystem,
    #[error("cross-covariance of correspondences is rank deficient")]
    DegenerateCorrespondences,
    #[error("no evaluation records")]
    EmptyRecords,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
