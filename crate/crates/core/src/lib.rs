pub mod error;
pub mod tape;
pub mod tensor;
pub mod mapping;
pub mod transformer;
pub mod distill;
pub mod data;
pub mod augment;
pub mod checkpoint;
pub mod optim;
pub mod metrics;
pub mod synthetic;
pub mod pipeline;
pub mod config;
pub mod ablation;
pub mod cli;

pub use error::{Error, Result};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
