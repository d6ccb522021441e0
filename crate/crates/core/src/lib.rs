//! W8A8 post-training quantized transformer encoder for CPU.
//!
//! An FP32 [`Model`] is calibrated once ([`Model::calibrate`]) and then
//! prepared for any [`ModeConfig`] with [`quantize_model`]. Which GeMM slots
//! run in INT8 is decided per mode; activation storage follows from that (see
//! [`mode::Dataflow`]).

pub mod calibration;
pub mod checkpoint;
pub mod compare;
pub mod error;
pub mod fold;
pub mod kernels;
pub mod layers;
pub mod mode;
pub mod model;
pub mod probe;
pub mod quant;
pub mod reference;
pub mod tensor;
pub mod toy;
pub mod traffic;

pub use calibration::{CalibrationTable, Calibrator};
pub use checkpoint::{write_atomic, BatchData, Container};
pub use compare::{compare, CompareReport, TensorMetrics};
pub use error::{Error, Result};
pub use mode::{mode_from_name, ModeConfig};
pub use model::{quantize_model, Batch, ForwardOutput, Model, ModelConfig, QuantizedModel};
pub use tensor::Tensor;
pub use traffic::{model_traffic, TrafficReport};
