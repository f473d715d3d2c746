pub mod attention;
pub mod autograd;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod explain;
pub mod layers;
pub mod models;
pub mod nn;
pub mod rng;
pub mod run;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Float, Tensor};
