use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite value at row {row}")]
    NonFinite { row: usize },
    #[error("token {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },
    #[error("sequence length {len} outside [{min}, {max}]")]
    SequenceLength { len: usize, min: usize, max: usize },
    #[error("cluster {cluster} is empty")]
    EmptyCluster { cluster: usize },
    #[error("singular factor: eigenvalue product {value:e} at ({row}, {col}) with zero damping")]
    SingularFactor { row: usize, col: usize, value: f64 },
    #[error("singular matrix in dense solve (pivot {pivot})")]
    SingularMatrix { pivot: usize },
    #[error("missing factor for tracked layer {layer} ({kind})")]
    MissingFactor { layer: usize, kind: &'static str },
    #[error("forward cache does not match the parameters it is used with")]
    StaleCache,
    #[error("sketch mismatch: {0}")]
    SketchMismatch(String),
    #[error("tracked parameter count {count} exceeds dense cap {cap}")]
    ParameterCap { count: usize, cap: usize },
    #[error("degenerate (zero-variance) score vector for {0}")]
    Degenerate(String),
    #[error("training diverged at step {step}: loss {loss} > 10x initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },
}
