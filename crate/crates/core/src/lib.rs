//! Self-supervised monocular depth estimation and lumen segmentation for
//! endoscopic video, trained by view synthesis on procedurally generated
//! colon-tube sequences.
//!
//! The crate is organized around the pipeline stages:
//!
//! - [`camera`]: pinhole and double-sphere projection models
//! - [`geometry`]: rigid warping, backprojection, differentiable sampling
//! - [`nn`]: convolution blocks, pixel-adaptive convolution, feature guidance
//! - [`losses`]: the photometric / consistency / smoothness / lumen stack
//!   with fixed and uncertainty-learned task weighting
//! - [`model`]: the multi-task depth + lumen network with cross-task pathways
//! - [`data`]: procedural tube renderer, dataset layout, augmentation
//! - [`train`]: deterministic training loop with checkpoint/resume
//! - [`eval`]: depth metric suite and segmentation IoU
//!
//! Everything runs in f64 on the CPU; [`graph`] provides the reverse-mode
//! tape the differentiable ops are built on.

pub mod camera;
pub mod data;
pub mod eval;
pub mod geometry;
pub mod graph;
pub mod losses;
pub mod model;
pub mod nn;
pub mod selfcheck;
pub mod tensor;
pub mod train;

pub use camera::{CameraModel, DoubleSphereParams, Intrinsics};
pub use geometry::{Pose, SamplingGrid};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
