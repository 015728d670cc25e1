//! Tensors, reverse-mode differentiation and the Adam optimiser.
//!
//! Just enough machinery to train the small convolutional and affine
//! networks used by the transform, the posterior heads and the context
//! model. Everything is `f64` and single-threaded per graph.

mod adam;
mod graph;
mod io;
mod layers;
pub mod kernels;
#[doc(hidden)]
pub mod testing;
mod params;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{CustomOp, Eval, Graph, IndexMap, Tape, Var, ZERO_INDEX};
pub use layers::{ConvStack, Layer, Mlp};
pub use io::{read_params, write_params, PARAM_MAGIC, PARAM_VERSION};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum NnError {
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("duplicate parameter name `{0}`")]
    DuplicateParameter(String),
    #[error("malformed parameter file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
