//! SO(3)-equivariant point-cloud classification with class-incremental
//! training, internal knowledge distillation, and a rehearsal exemplar buffer.
//!
//! The crate is organized around the experiment pipeline:
//!
//! - [`geometry`]: rotations, Haar sampling, and their action on clouds
//! - [`dataio`]: synthetic shape catalog, OFF meshes, normalization
//! - [`eqnet`]: the equivariant feature extractor and its gradient engine
//! - [`losses`]: classification / distillation loss primitives
//! - [`rehearsal`]: budgeted exemplar memory
//! - [`protocol`]: task streams, the training loop, and evaluation metrics
//! - [`verify`]: self-contained property suites and reference oracles
//!
//! All numeric code is generic over the scalar type (see [`scalar::Real`]);
//! property suites run in `f64`, training may run in `f32` via configuration.

pub mod dataio;
pub mod eqnet;
pub mod fsutil;
pub mod geometry;
pub mod linalg;
pub mod losses;
pub mod protocol;
pub mod rehearsal;
pub mod scalar;
pub mod seeding;
pub mod verify;

pub use scalar::Real;

/// Double-precision aliases, the default for property suites and tests.
pub type Rotation64 = geometry::Rotation<f64>;
pub type PointCloud64 = geometry::PointCloud<f64>;
pub type FeatureMap64 = eqnet::FeatureMap<f64>;
pub type Model64 = eqnet::Model<f64>;

/// Single-precision aliases for the training hot path.
pub type Rotation32 = geometry::Rotation<f32>;
pub type PointCloud32 = geometry::PointCloud<f32>;
pub type FeatureMap32 = eqnet::FeatureMap<f32>;
pub type Model32 = eqnet::Model<f32>;
