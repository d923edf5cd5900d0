//! Crate-wide error type.

use thiserror::Error;

/// Unified error for every pipeline stage.
#[derive(Debug, Error)]
pub enum Error {
    // ---- geometry ----
    #[error("point cloud is empty")]
    EmptyCloud,
    #[error("invalid box: min {min:?} exceeds max {max:?}")]
    InvalidBox { min: [f64; 3], max: [f64; 3] },
    #[error("degenerate box: extent {extent:?} must be strictly positive on every axis")]
    DegenerateBox { extent: [f64; 3] },
    #[error("voxel resolution {0} outside supported range 2..=1024")]
    BadResolution(u32),
    #[error("matrix is not a rotation: orthogonality residual {ortho:.3e}, determinant {det:.9}")]
    NotARotation { ortho: f64, det: f64 },

    // ---- segmentation ----
    #[error("{context}: dimensions {actual_w}x{actual_h} do not match expected {expected_w}x{expected_h}")]
    DimensionMismatch {
        context: &'static str,
        expected_w: u32,
        expected_h: u32,
        actual_w: u32,
        actual_h: u32,
    },
    #[error("invalid camera intrinsics: {0}")]
    BadIntrinsics(String),
    #[error("depth sample {index} is {value}: depths must be finite and non-negative")]
    BadDepthValue { index: usize, value: f32 },
    #[error("no segment survived lifting: every mask label was empty, invalid, or outside the workspace")]
    EmptySegmentation,

    // ---- locquant ----
    #[error("invalid quantization config: {0}")]
    BadQuantConfig(String),
    #[error("object centroid {centroid:?} lies outside the workspace")]
    CentroidOutsideWorkspace { centroid: [f64; 3] },
    #[error("{what} bin {bin} outside valid range 1..={max}")]
    BinOutOfRange { what: &'static str, bin: u16, max: u16 },
    #[error("scale fraction {0} outside (0, 1]")]
    BadScaleFraction(f64),
    #[error("token {token} is not a {expected} token")]
    TokenOutOfSegment { token: u32, expected: &'static str },

    // ---- vqtok ----
    #[error("invalid patch layout: {0}")]
    BadPatchLayout(String),
    #[error("invalid codebook: {0}")]
    BadCodebook(String),
    #[error("patch index {index} out of range: layout has {count} patches")]
    PatchOutOfRange { index: usize, count: usize },
    #[error("shape token {token} out of range for codebook of size {k}")]
    TokenOutOfRange { token: u32, k: u32 },
    #[error("token grid has {actual} tokens, layout expects {expected}")]
    TokenCountMismatch { actual: usize, expected: usize },
    #[error("grid resolution {actual} does not match layout resolution {expected}")]
    GridResolutionMismatch { actual: u32, expected: u32 },

    // ---- predictor ----
    #[error("invalid instruction: {0}")]
    BadInstruction(String),
    #[error("malformed token sequence: {0}")]
    MalformedSequence(String),
    #[error("vocabulary expects {vocab} shape ids but codebook has {codebook} entries")]
    VocabCodebookMismatch { vocab: u32, codebook: u32 },
    #[error("oracle target object {0} absent from the sequence")]
    TargetAbsent(u32),
    #[error("invalid n-gram model: {0}")]
    BadNgram(String),
    #[error("invalid predictor spec: {0}")]
    BadPredictor(String),
    #[error("invalid LoRA config: {0}")]
    BadLora(String),

    // ---- icp ----
    #[error("paired clouds differ in size: {source_len} source vs {target_len} target points")]
    SizeMismatch { source_len: usize, target_len: usize },
    #[error("need at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("degenerate correspondence geometry: cross-covariance rank < 2 (singular values {sv:?})")]
    DegenerateGeometry { sv: [f64; 3] },
    #[error("invalid ICP config: {0}")]
    BadIcpConfig(String),

    // ---- rollout ----
    #[error("invalid scene spec: {0}")]
    BadSceneSpec(String),
    #[error("invalid task: {0}")]
    BadTask(String),
    #[error("object placement failed after {0} rejection-sampling attempts")]
    PlacementFailed(u32),
    #[error("cannot summarize an empty outcome list")]
    NoOutcomes,

    // ---- file formats ----
    #[error("{format}: {message}")]
    Format { format: &'static str, message: String },
    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Shorthand for file-format violations.
    pub(crate) fn format(format: &'static str, message: impl Into<String>) -> Self {
        Error::Format { format, message: message.into() }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
