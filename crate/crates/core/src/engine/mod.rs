//! Dense arrays, reverse-mode autodiff, Adam, and parameter checkpoints.

mod adam;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod param;
mod tensor;

pub use adam::AdamState;
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use param::{Init, ParamId, ParamStore, Parameter};
pub use tensor::{Scalar, Tensor};
