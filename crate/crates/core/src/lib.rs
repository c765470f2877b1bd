//! Few-shot domain adaptation for low-light raw image enhancement.

pub mod checks;
pub mod cli;
pub mod error;
pub mod experiment;
pub mod io;
pub mod nets;
pub mod objectives;
pub mod raw;
pub mod seed;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
