pub mod attention;
pub mod checkpoint;
pub mod diagnostics;
pub mod error;
pub mod experiment;
pub mod model;
pub mod params;
pub mod quant;
pub mod report;
pub mod sites;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

#[cfg(test)]
pub(crate) mod testutil;
