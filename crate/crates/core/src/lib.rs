//! Metal-conscious projection inpainting for cone-beam CT.
//!
//! The crate is organized as a pipeline: `sim` synthesizes scans and metal
//! masks, `tensor` provides the autodiff engine, `swin` + `metal` + `model`
//! form the inpainting network, `train` fits it, and `metrics` scores the
//! results against classical interpolation.

pub mod error;
pub mod metal;
pub mod metrics;
pub mod model;
pub mod params;
pub mod sim;
pub mod swin;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use metal::{MetalMask, MetalTerms, Variant};
pub use metrics::{EvalReport, EvalRow, Psnr, ReconGrid};
pub use model::ModelConfig;
pub use params::{Bound, ParamStore};
pub use sim::{Geometry, ProjectionSet, Scene, Volume};
pub use swin::{EncoderConfig, TokenGrid};
pub use tensor::{Gradients, Primitive, Tape, Tensor, TensorId};
