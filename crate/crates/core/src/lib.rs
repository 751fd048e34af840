//! Normalizing flows on manifold-valued fields.
//!
//! Fields hold one point of a sphere, the positive reals or the SPD
//! matrices per (voxel, channel). Flows act on global chart coordinates
//! through actnorm, 1×1 rotation and affine coupling layers with group
//! translations. A two-stream conditional model pairs a flow on a source
//! manifold with one on a target manifold and learns the target latent
//! Gaussian from the source latents.

pub mod ad;
pub mod check;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod field;
pub mod geometry;
pub mod layers;
pub mod linalg;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod scalar;
pub mod train;

pub use error::{Error, Result};
pub use field::{ChartField, Field};
pub use geometry::{ChartKind, Kind, ManifoldGaussian, ManifoldKind};
pub use model::{ConditionalModel, ConditionalSpec, FlowModel, FlowSpec, LatentTransfer};
pub use scalar::Scalar;

pub type FlowModel64 = FlowModel<f64>;
pub type ConditionalModel64 = ConditionalModel<f64>;
