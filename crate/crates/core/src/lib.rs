pub mod ceim;
pub mod data;
pub mod error;
pub mod graph;
pub mod modules;
pub mod search;
pub mod supernet;
pub mod tensor;

pub use error::{ErrorCategory, NasError, Result};
