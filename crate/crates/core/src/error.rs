use thiserror::Error;

use crate::linop::DomainShape;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left} is not compatible with {right}")]
    ShapeMismatch { left: DomainShape, right: DomainShape },

    #[error("operator is not square: domain {domain}, codomain {codomain}")]
    NotSquare {
        domain: DomainShape,
        codomain: DomainShape,
    },

    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("non-finite value at entry {index}")]
    NonFinite { index: usize },

    #[error("non-finite activation in batch {batch} at time {time}")]
    NonFiniteState { batch: usize, time: usize },

    #[error("refusing to materialize operator of dimension {dim}: cap is {cap}")]
    MaterializeCap { dim: usize, cap: usize },

    #[error("operator has zero Frobenius norm")]
    ZeroNorm,

    #[error("operator is not positive semidefinite: Rayleigh quotient {value:e} below tolerance")]
    NotPsd { value: f64 },

    #[error("eigensolver did not converge in {iterations} iterations (worst residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("{0} is frozen and cannot receive a perturbation")]
    FrozenFamily(String),

    #[error("no trainable weight family")]
    NothingTrainable,

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("training diverged at iteration {iteration} (loss {loss:e})")]
    Diverged { iteration: usize, loss: f64 },

    #[error("parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
