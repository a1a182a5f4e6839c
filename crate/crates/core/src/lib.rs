//! Operator-level tools for neural tangent kernels of recurrent and
//! attention models.

pub mod error;
pub mod io;
pub mod linop;
pub mod models;
pub mod ntkops;
pub mod numerics;
pub mod rnla;
pub mod rng;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};
pub use linop::{Axis, DomainShape, LinOp, Operator};
pub use rnla::{ProbeConfig, RankMethod, SpectrumSummary};
pub use tensor::Tensor3;
