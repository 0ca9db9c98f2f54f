//! Multi-granular trajectory alignment for knowledge distillation.

pub mod autodiff;
pub mod config;
pub mod corpus;
pub mod error;
pub mod harness;
pub mod hidden_dump;
pub mod losses;
pub mod model;
pub mod objective;
pub mod optim;
pub mod rouge;
pub mod saliency;
pub mod schedule;
pub mod spans;
pub mod tensor;
pub mod tokenizer;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
