//! Minimal CPU tensor engine: dense `f64` tensors, im2col convolutions,
//! a reverse-mode autodiff tape and the AdamW optimiser.

mod graph;
pub mod kernels;
mod optim;
mod params;
mod tensor;

pub use graph::{log_softmax_channels, Gradients, Graph, Var};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;
