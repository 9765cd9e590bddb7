pub mod attention;
pub mod data;
pub mod error;
pub mod harness;
pub mod image;
pub mod jpeg;
pub mod model;
pub mod nn;
pub mod oda;
pub mod tensor;

pub use error::{Error, Result};
