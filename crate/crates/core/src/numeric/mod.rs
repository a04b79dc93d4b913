//! Dense linear algebra, the embedding network with exact backprop, SGD and
//! finite-difference gradient checking.

pub mod checkpoint;
pub mod gradcheck;
pub mod matrix;
pub mod model;
pub mod sgd;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::{dot, l2_norm, Matrix};
pub use model::{Activation, Architecture, EmbeddingModel, ForwardCache, Gradients, Layer};
pub use sgd::{SgdConfig, SgdState};
