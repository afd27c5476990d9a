//! Dual-stream selective-scan segmentation for optical + elevation imagery.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`], [`autodiff`], [`ops`], [`layers`], [`numerics`]: dense
//!   tensors and a tape-based reverse-mode engine with hand-written
//!   backward rules.
//! - [`scan_geometry`], [`selective_scan`]: windowed scan orders and the
//!   input-selective state-space scan (reference and production kernels).
//! - [`blocks`], [`fusion`], [`network`]: gated scan blocks, the
//!   axial-relation fusion module and the full encoder/decoder.
//! - [`metrics`], [`data`], [`train`], [`gradcheck`], [`checkpoint`]:
//!   evaluation, synthetic data, optimisation and verification tooling.

pub mod autodiff;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod network;
pub mod numerics;
pub mod ops;
pub mod params;
pub mod scan_geometry;
pub mod selective_scan;
pub mod tensor;
pub mod train;

pub use autodiff::{Ctx, Graph, Gradients, Var};
pub use error::{Error, Result};
pub use params::{ParamBuilder, ParamId, ParamStore, ParamTensor};
pub use tensor::{Scalar, Tensor};
