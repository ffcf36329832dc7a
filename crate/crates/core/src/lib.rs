pub mod backbone;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod inference;
pub mod memory;
pub mod tensor;
pub mod training;
pub mod verify;

pub use error::{Error, Result};
