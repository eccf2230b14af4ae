pub mod augment;
pub mod data;
mod error;
pub mod eval;
pub mod io;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Element, Parameter, Tensor, TensorError};
