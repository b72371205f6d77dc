pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gatnet;
pub mod hypernet;
pub mod model;
pub mod numkernel;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{FlatError, Result};
