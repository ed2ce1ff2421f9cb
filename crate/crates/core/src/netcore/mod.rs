//! Minimal differentiable tensor framework.
//!
//! There is no autograd tape: each [`layers::Layer`] caches what its backward
//! pass needs and models chain `forward`/`backward` explicitly.

pub mod checkpoint;
pub mod gradcheck;
pub mod layers;
pub mod loss;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use layers::{Conv2d, Dense, Dropout, Flatten, Layer, MaxPool2d, Mode, Relu, Sequential};
pub use loss::{smooth_l1, softmax, softmax_cross_entropy};
pub use optim::{build_optimizer, Adam, Optimizer, OptimizerKind, Sgd};
pub use tensor::{Scalar, Tensor};
