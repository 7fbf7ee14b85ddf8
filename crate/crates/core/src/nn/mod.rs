//! Minimal reverse-mode autodiff with transformer layers and AdamW.

pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{gradcheck, GradCheckReport};
pub use graph::{Graph, Unary, Var};
pub use layers::{fourier_features, timestep_embedding, Attention, Block, LayerNorm, Linear, Mlp, LN_EPS};
pub use optim::{Adam, AdamConfig};
pub use params::{Grads, Param, ParamId, ParamStore};
pub use tensor::Tensor;
