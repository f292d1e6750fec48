pub mod artifacts;
pub mod augmentation;
pub mod certify;
pub mod cli;
pub mod config;
pub mod encoders;
pub mod error;
pub mod losses;
pub mod numeric;
pub mod similarity;
pub mod training;
pub mod world;

pub use error::{Error, Result};
