//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input contains a NaN or infinite entry")]
    NonFiniteInput,
    #[error("matrix norm exponents must satisfy p >= 1 and q >= 1")]
    BadExponent,
    #[error("alpha must lie in [0, 1], got {0}")]
    AlphaOutOfRange(f64),
    #[error("operation requires at least two columns")]
    TooFewColumns,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("atom is identically zero")]
    ZeroAtom,
    #[error("column {0} has zero norm")]
    ZeroColumn(usize),
    #[error("active-set normal system is singular")]
    SingularActiveSet,
    #[error("label {label}: requested {requested} samples, only {available} available")]
    InsufficientData {
        label: usize,
        requested: usize,
        available: usize,
    },
    #[error("column index {index} out of range for a block of {len} columns")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("objective returned a non-finite value")]
    NonFiniteObjective,
    #[error("sparse code is identically zero; energy ratios are undefined")]
    ZeroCode,
    #[error("group split leaves the {0} side empty")]
    EmptySplit(&'static str),
    #[error("invalid spec: {0}")]
    BadSpec(String),
    #[error("parse error at line {line}: {reason}")]
    ParseError { line: usize, reason: String },
    #[error("schema error: missing columns {missing:?}")]
    SchemaError { missing: Vec<String> },
    #[error("length mismatch: {truth} true labels vs {predicted} predictions")]
    LengthMismatch { truth: usize, predicted: usize },
    #[error("label {0} out of range 1..={1}")]
    LabelOutOfRange(usize, usize),
    #[error("cross-validation with {folds} folds needs at least that many groups, found {groups}")]
    InsufficientGroups { folds: usize, groups: usize },
    #[error("warmup discards every timing measurement")]
    EmptyMeasurement,
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("invalid model file: {0}")]
    InvalidModel(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
