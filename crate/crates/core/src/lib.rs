//! Language-driven 4D scene engine.
//!
//! Scenes are sets of dynamic 3D Gaussians bound to a motion scaffold and
//! carrying latent feature vectors. The crate covers the full loop:
//!
//! - [`parser`] turns a command string into an [`parser::ExecutionPlan`].
//! - [`trajectory`] converts motion plans into per-frame bounding boxes.
//! - [`guidance`] runs a toy latent diffusion sampler whose cross-attention
//!   maps are steered into those boxes by energy minimisation.
//! - [`scene`] and [`raster`] hold the Gaussian representation and the
//!   software splatter used for both colour and feature maps.
//! - [`distill`] fits per-Gaussian features and a task decoder.
//! - [`editor`] selects Gaussians for a language target and applies edits.
//! - [`formats`] reads and writes the on-disk artifacts.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod distill;
pub mod editor;
pub mod formats;
pub mod guidance;
pub mod parser;
pub mod raster;
pub mod scene;
pub mod trajectory;

mod math;

pub use distill::{FeatureDecoder, SyntheticEncoder};
pub use editor::{QuerySet, SelectionResult};
pub use parser::ExecutionPlan;
pub use raster::RenderOutput;
pub use scene::{Camera, Gaussian3D, GaussianScene, MotionScaffold};
