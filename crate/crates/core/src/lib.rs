pub mod augment;
pub mod compression;
pub mod dataset;
pub mod error;
pub mod experiment;
pub mod model;
pub mod pixels;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
