//! Joint exploration of CNN topology and fixed-point parameter width for
//! small dataflow accelerators.
//!
//! The flow trains a fixed-depth digit classifier for each candidate
//! topology, quantizes its parameters to `B` bits, measures accuracy with a
//! bit-true integer datapath, estimates the DSP blocks a dataflow
//! implementation would use, and ranks design points by accuracy per DSP.

pub mod codegen;
pub mod costmodel;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod explorer;
pub mod inference;
pub mod model;
mod nn;
pub mod quantizer;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
pub use model::{FixedPointFormat, FloatNetwork, QuantizedNetwork, Tensor, Topology};
