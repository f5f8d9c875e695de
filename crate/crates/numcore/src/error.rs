use thiserror::Error;

/// Errors raised by tensor construction, graph ops and serialization.
#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    Axis {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: data length {len} does not match shape {shape:?}")]
    Length {
        op: &'static str,
        len: usize,
        shape: Vec<usize>,
    },

    #[error("{op}: slice {slice} is fully masked")]
    DegenerateSlice { op: &'static str, slice: usize },

    #[error("{op}: produced a non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },

    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("finite-difference probe of parameter {param} element {element} is not finite")]
    Probe { param: usize, element: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("tensor format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TensorError>;
