use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the numerical core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("softmax row {row} has every entry masked")]
    AllMasked { row: usize },
    #[error("entity {entity:?} variate {variate} has no observed values")]
    AllMissing { entity: String, variate: usize },
    #[error("entity {entity} has no unpadded variates")]
    EmptyEntity { entity: usize },
    #[error("length {total} is not divisible by patch length {patch_len}")]
    Divisibility { total: usize, patch_len: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite value in {name} at index {index}")]
    NonFinite { name: String, index: usize },
    #[error("no valid target cells in loss")]
    NoValidCells,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),
    #[error("duplicate parameter name {0:?}")]
    DuplicateParameter(String),
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("entity {entity:?} has {length} steps, needs at least {required}")]
    TooShort {
        entity: String,
        length: usize,
        required: usize,
    },
    #[error("kernel factorization failed: {0}")]
    Factorization(String),
}

pub type Result<T, E = Error> = core::result::Result<T, E>;
