//! Learns articulated pose variation from a population of corresponded
//! triangle meshes.
//!
//! The vertices of all shapes are stacked into one data vector per vertex and
//! fitted with a mixture of factor analyzers whose loadings are constrained
//! to stacked rotations. Each component becomes a rigid part with one
//! rotation and translation per shape; the posterior means give a shared
//! reference geometry, and new poses are generated by interpolating part
//! rotations while keeping adjacent parts in contact.
//!
//! All numerical code is generic over [`Real`] (`f32` or `f64`); the
//! `*64` aliases below are the concrete types used by the CLI.

// `!(x > 0)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod artifact;
pub mod error;
pub mod hierarchy;
pub mod interpolation;
pub mod mesh;
pub mod mfa;
pub mod scalar;
pub mod synthetic;

pub use error::{Error, Result};
pub use scalar::Real;

pub type Mesh64 = mesh::Mesh<f64>;
pub type TrainingSet64 = mesh::TrainingSet<f64>;
pub type DataVector64 = mesh::DataVector<f64>;
pub type FactorAnalyzer64 = mfa::FactorAnalyzer<f64>;
pub type MixtureModel64 = mfa::MixtureModel<f64>;
pub type LatentShape64 = hierarchy::LatentShape<f64>;
pub type PoseModel64 = hierarchy::PoseModel<f64>;
pub type PartGraph64 = interpolation::PartGraph<f64>;
pub type PoseBlend64 = interpolation::PoseBlend<f64>;

pub type Mesh32 = mesh::Mesh<f32>;
pub type TrainingSet32 = mesh::TrainingSet<f32>;
pub type MixtureModel32 = mfa::MixtureModel<f32>;
pub type PoseModel32 = hierarchy::PoseModel<f32>;

/// Library version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
