//! Dense matrices, seeded randomness, reverse-mode gradients and the AdamW
//! optimizer: just enough machinery to train and differentiate the toy
//! mixture-of-experts models.

mod gradcheck;
mod graph;
mod matrix;
mod optim;
mod rng;
mod scalar;

pub use gradcheck::{grad_check, grad_check_at, GradReport, ParamAccess, ProbeSpec};
pub use graph::{Gradients, Graph, NodeId};
pub use matrix::Matrix;
pub use optim::{AdamW, AdamWConfig};
pub use rng::RandomSource;
pub use scalar::{DType, Scalar};

pub(crate) use graph::sigmoid;
