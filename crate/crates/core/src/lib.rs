//! Video pose estimation by heatmap regression, optical-flow warping of
//! per-frame joint confidence maps, and learned temporal pooling.

pub mod error;
pub mod eval;
pub mod flow;
pub mod heatmap;
mod kv;
pub mod network;
pub mod pose;
pub mod synth;
pub mod temporal;
pub mod train;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
