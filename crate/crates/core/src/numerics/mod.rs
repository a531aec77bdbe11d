//! Dense f32 tensors, a reverse-mode tape and AdamW.

pub mod gradcheck;
mod graph;
pub mod linalg;
mod optim;
mod tensor;

pub use graph::{CustomOp, Gradients, Graph, Unary, Var};
pub use optim::{clip_grad_norm, AdamWConfig, Bound, LrSchedule, OptimState, Params};
pub use tensor::{argmax, Tensor};
