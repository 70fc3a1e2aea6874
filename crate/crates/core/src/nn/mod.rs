//! Tensors, convolution, the reverse-mode tape, optimizer and checkpoints.

pub mod checkpoint;
pub mod conv;
pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use optim::{adam_step, AdamConfig, ParamStore, Parameter};
pub use tape::{Gradients, ParamKey, Tape, Var, FUSE_EPS};
pub use tensor::{Scalar, Tensor};
