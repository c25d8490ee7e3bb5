pub mod augment;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod selftrain;
pub mod supervision;
pub mod tools;
pub mod train;
pub mod types;

pub use error::{Error, Result};
