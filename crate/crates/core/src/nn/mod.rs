//! Reverse-mode automatic differentiation over dense `f64` tensors, the layer
//! set used by the networks, and a finite-difference gradient checker.

mod gemm;
mod gradcheck;
mod graph;
mod layers;
mod ops;
mod optim;
mod params;
mod tensor;

pub use gemm::gemm;
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Grads, Graph, ParamGrads, Var};
pub use layers::{forward, BatchNorm, BiLstm, Conv1d, Embedding, Layer, LayerSpec, Linear, Lstm};
pub use optim::{clip_global_norm, Adam};
pub use params::{orthogonal, xavier_uniform, ParamEntry, ParamGroup, ParamId, ParamStore, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
