//! Dense tensors, reverse-mode autodiff and the AdamW optimizer.

mod dense;
pub mod io;
pub mod kernels;
mod optim;
mod params;
mod scalar;
mod tape;

pub use dense::Tensor;
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamSet};
pub use scalar::Scalar;
pub use tape::{Function, Gradients, Tape, Var};
