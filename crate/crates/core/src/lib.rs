pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod losses;
pub mod lpf;
pub mod model;
pub mod nn;
pub mod registry;
pub mod report;
pub mod seeds;
pub mod train;

pub use error::{Error, Result};
