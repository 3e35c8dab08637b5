//! Dense tensors, reverse-mode differentiation and the optimizer.

mod gradcheck;
mod graph;
mod mask;
pub mod ops;
mod optim;
mod param;
mod rng;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use mask::AttentionMask;
pub use ops::{layer_norm, masked_softmax};
pub use optim::{adam_step, decays, AdamConfig, AdamState};
pub use param::{ParamId, ParamStore, Parameter};
pub use rng::{mix64, Rng};
pub use tensor::Tensor;
