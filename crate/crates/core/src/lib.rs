pub mod checkpoint;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod lm;
pub mod nn;
pub mod numerics;
pub mod synth;

pub use error::{Error, ErrorKind, Result};
