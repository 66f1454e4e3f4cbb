//! Dynamic inverted residual networks for audio tagging.
//!
//! The crate covers a small dense-tensor engine with analytic gradients, a
//! log-mel frontend, the dynamic block components (context generation,
//! dynamic ReLU, dynamic convolution, coordinate attention), the full network
//! family, a MAC/parameter profiler, a distillation trainer, inspection
//! probes, a weight container and the `dymn` command line.

pub mod blocks;
pub mod cli;
pub mod container;
pub mod error;
pub mod frontend;
pub mod inspection;
pub mod metrics;
pub mod network;
pub mod params;
pub mod profiler;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
