//! Dense tensors, parameter vectors, reverse-mode differentiation, losses and
//! the SGD optimizer.

mod dense;
pub mod gradcheck;
pub mod ops;
mod optim;
mod params;
pub mod tape;

pub use dense::Tensor;
pub use gradcheck::{grad_check, GradCheckReport};
pub use ops::{cross_entropy, dense_forward, kl_divergence, matmul, mse, softmax_with_temperature};
pub use optim::Sgd;
pub use params::{Gradient, Layout, ParamVector};
pub use tape::{Grads, Pool, Tape, Var};
