//! Reverse-mode differentiation, SIREN layers, loss and optimizer.

pub mod checkpoint;
mod dense;
pub mod fastmath;
mod graph;
mod loss;
mod ops;
mod optim;
mod tensor;

pub use dense::{Activation, DenseLayer, Siren, SirenSpec};
pub use graph::{Gradients, Grads, Graph, Op, Values, Var};
pub use loss::{charbonnier_loss, charbonnier_value, CHARBONNIER_EPS};
pub use ops::{gemm, set_corrupt_sine_backward};
pub use optim::{adam_step, cosine_lr, AdamState};
pub use tensor::{ParamId, ParamStore, Tensor};
