pub mod autodiff;
pub mod cli;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod model;
pub mod mten;
pub mod nn;
pub mod sim;
pub mod tensor;
pub mod train;
pub mod video;

pub use error::{Error, Result};
pub use tensor::{DType, Real, Tensor};
