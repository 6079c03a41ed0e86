pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod masking;
pub mod model;
pub mod patching;
pub mod ppm;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
