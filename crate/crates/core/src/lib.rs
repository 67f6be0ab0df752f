//! Conditional normalizing-flow teacher, feed-forward students and the
//! distillation, fusion and benchmarking machinery around them.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod flow;
pub mod fusion;
pub mod graph;
pub mod kernels;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod spectral;
pub mod student;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{
    grad_check, grad_check_model, grad_check_params, Eager, Graph, Parametric, Tape, Var,
};
pub use params::{ParamId, ParamStore};
pub use tensor::{Real, Tensor};
