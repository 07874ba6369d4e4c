use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeDataMismatch { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: String,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("operands live on different tapes")]
    MixedTapes,
    #[error("grad root must be scalar, got shape {shape:?}")]
    RootNotScalar { shape: Vec<usize> },
    #[error("leaf is not on the tape")]
    LeafNotOnTape,
    #[error("leaf does not track gradients")]
    LeafNotTracked,
    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },
}

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: bad IDX magic {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: String,
        found: u32,
        expected: u32,
    },
    #[error("{path}: truncated payload, expected {expected} bytes, got {got}")]
    Truncated {
        path: String,
        expected: usize,
        got: usize,
    },
    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
}

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid attack spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Error)]
pub enum MetricError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("input dimension {d} exceeds the dense-Hessian limit {limit}; use a small-d dataset")]
    DimensionTooLarge { d: usize, limit: usize },
    #[error("all samples excluded (denominator below tolerance)")]
    AllSamplesExcluded,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("non-finite gradient at epoch {epoch}, batch {batch} (norm {norm})")]
    NonFiniteGradient { epoch: usize, batch: usize, norm: f64 },
    #[error("invalid train plan: {0}")]
    InvalidPlan(String),
    #[error("metrics sink failure: {0}")]
    Sink(String),
}
