pub mod augment;
pub mod cli;
pub mod data_io;
pub mod diagnostics;
mod dense;
pub mod error;
pub mod grid;
pub mod losses;
pub mod matcher;
pub mod pipeline;
pub mod projection;
pub mod trainer;

pub use error::{Error, Result};
