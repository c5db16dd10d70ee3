//! Reverse-mode automatic differentiation over small dense `f64` matrices.
//!
//! A [`Tape`] records every op applied to [`Var`] handles and replays the
//! chain rule once in reverse. Learnable tensors live in a [`ParamStore`]
//! and are updated by [`Adam`] between passes.

mod catalog;
mod error;
mod gradcheck;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use catalog::{op_catalog, OpCase};
pub use error::{Result, TensorError};
pub use gradcheck::grad_check;
pub use optim::Adam;
pub use params::{read_tensor_list, write_tensor_list, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
