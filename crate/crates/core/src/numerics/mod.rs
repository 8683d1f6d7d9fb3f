//! Dense tensors, reverse-mode differentiation and the optimizer.

mod gemm;
pub mod gradcheck;
mod optim;
mod param;
mod tape;
mod tensor;

pub use optim::{adam_step, Adam};
pub use param::{Gradients, Init, ParamId, ParamStore, Parameter};
pub use tape::{NodeGrads, Tape, Var};
pub use tensor::Tensor;

