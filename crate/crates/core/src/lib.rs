pub mod error;
pub mod linalg;
pub mod geometry;
pub mod semlift;
pub mod partition;
pub mod nn;
pub mod condition;
pub mod policy;
pub mod bench;

pub use error::{Error, Result};
