//! Numeric substrate: dense `f64` tensors, a reverse-mode gradient tape,
//! a central-difference checker and seeded random streams.

mod error;
mod gradcheck;
mod graph;
pub mod rng;
mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::grad_check;
pub use graph::{softmax_forward, Graph, Var};
pub use rng::SeedStream;
pub use tensor::Tensor;
