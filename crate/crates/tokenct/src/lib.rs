//! Files, training loops and the command line around [`tokenct_core`].
pub mod cli;
pub mod dataset;
pub mod error;
pub mod io;
pub mod pipeline;
pub mod training;

pub use error::{Error, Result};
