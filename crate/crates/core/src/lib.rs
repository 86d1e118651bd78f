//! Analysis, simulation, quantization and execution toolkit for
//! inference graphs.

pub mod cost;
pub mod error;
pub mod fixtures;
pub mod fusion;
pub mod interp;
pub mod ir;
pub mod kernels;
pub mod quant;
pub mod roofline;

pub use error::{Error, Result};
