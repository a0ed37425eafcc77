//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] records operations as they execute; [`Graph::backward`] sweeps
//! the tape once in reverse. Parameters live in a [`ParamStore`] outside any
//! graph and are bound to a graph by name with [`Graph::param`], so one store
//! can drive any number of forward passes.

mod error;
mod graph;
mod kernels;
mod optim;
mod params;
mod scalar;
mod smallgemm;
mod tensor;

pub mod fd;

pub use error::{Result, TensorError};
pub use graph::{Graph, Var};
pub use optim::{sgd_step, Adam, Optimizer, Sgd};
pub use params::{blob_path, load_params, save_params, Gradients, ParamStore, PARAM_FORMAT, PARAM_FORMAT_VERSION};
pub use scalar::Scalar;
pub use kernels::EDGE_TOLERANCE;
pub use tensor::Tensor;
