use crate::geometry::FrameId;

/// Errors produced anywhere in the tracking engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("frame mismatch: cannot chain a transform from `{found}` into one expecting `{expected}`")]
    FrameMismatch { expected: FrameId, found: FrameId },

    #[error("point behind camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("marker corner {corner} lies behind the camera (z = {z})")]
    CornerBehindCamera { corner: usize, z: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid depth t_z = {0} mm (must be > 0)")]
    InvalidDepth(f64),

    #[error("translation has zero norm")]
    ZeroNorm,

    #[error("{0}: no estimates to fuse")]
    Empty(&'static str),

    #[error("invalid camera intrinsics: {0}")]
    InvalidIntrinsics(String),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("duplicate tag id {0}")]
    DuplicateTagId(u32),

    #[error("duplicate camera id {0}")]
    DuplicateCameraId(u32),

    #[error("extrinsic `{path}` is not an invertible rigid transform: {reason}")]
    NonInvertibleExtrinsic { path: String, reason: String },

    #[error("no head marker visible")]
    NoHeadMarkerVisible,

    #[error("coil marker not visible")]
    CoilNotVisible,

    #[error("insufficient samples: {found} frames, need at least {required}")]
    InsufficientSamples { found: usize, required: usize },

    #[error("unsupported report format `{0}` (expected csv or txt)")]
    UnsupportedFormat(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
