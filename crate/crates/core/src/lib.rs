pub mod autograd;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod generator;
pub mod identity;
pub mod losses;
pub mod model;
pub mod nn;
pub mod plot;
pub mod train;

pub use error::{Error, Result};
