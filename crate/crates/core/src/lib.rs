pub mod checkpoint;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod msvg;
pub mod optim;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod trm;
#[cfg(test)]
pub(crate) mod testutil;

pub use error::{Error, Result};
pub use tensor::{Gradients, Tape, Tensor, Var};
