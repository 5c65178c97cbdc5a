pub mod bench;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod dropout;
pub mod error;
pub mod model;
pub mod netconv;
pub mod netfc;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
