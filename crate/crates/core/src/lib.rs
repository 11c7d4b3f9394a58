//! Synthesis of the preferred appearance image and motion sequence of any
//! unit in a frozen two-stream convolutional network, by regularized
//! gradient ascent on the input, plus encoders that turn the result into
//! images and flow-video frames.
//!
//! The crate is organized around five pieces:
//!
//! - [`tensor`]: dense H x W x T x C volumes, the binary `.stt` container,
//!   and the finite-difference probe used to check every analytic gradient.
//! - [`network`]: a frozen-weight two-stream layer DAG with forward,
//!   backward-to-input, receptive-field and calibration queries.
//! - [`regularizers`]: bounded-energy and spatiotemporal total-variation
//!   penalties with analytic gradients.
//! - [`maximizer`]: the ascent loop (ADAM or plain steps, jitter, ball
//!   projection, convergence detection) and batch execution.
//! - [`flowviz`]: deterministic flow-video and image encoders writing
//!   bit-exact PPM frames.

pub mod error;
pub mod flowviz;
pub mod kv;
pub mod maximizer;
pub mod network;
pub mod regularizers;
pub mod tensor;

pub use error::{Error, Result};
pub use flowviz::{encode_appearance, encode_flow, FlowVideo, RgbImage};
pub use maximizer::{maximize, run_batch, MaximizationConfig, MaximizationResult};
pub use network::{CalibrationTable, NetworkGraph, NetworkSpec, UnitRef};
pub use regularizers::RegularizerConfig;
pub use tensor::{finite_difference_gradient, SpatiotemporalTensor};
