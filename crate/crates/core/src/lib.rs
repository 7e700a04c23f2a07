pub mod blocks;
pub mod dataset;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod network;
pub mod ops;
pub mod seed;
pub mod svm;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Element, Shape, Tensor};
