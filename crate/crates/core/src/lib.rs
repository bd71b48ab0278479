//! Selective state-space scans and disparity-guided RGB/IR fusion blocks on
//! top of a small dense tensor type with tape-based reverse-mode
//! differentiation.

pub mod autograd;
pub mod backbone;
pub mod dcfm;
pub mod error;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod metrics;
pub mod mta;
pub mod params;
pub mod ssm;
pub mod tensor;

pub use autograd::{Graph, OpKind, Var};
pub use error::{Error, Result};
pub use params::{Binding, ParamId, ParamStore};
pub use tensor::Tensor;
