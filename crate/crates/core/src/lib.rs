//! Correspondence-free rigid point-cloud registration with learned descriptors.
//!
//! The crate is `no_std` and only needs an allocator. It contains everything
//! that is pure computation:
//!
//! - [`geom3d`]: SE(3) twists, exponential/logarithm maps, transform sampling
//!   and rotation error metrics.
//! - [`cloud`]: point clouds, triangle meshes, surface sampling, corruption
//!   models, exact nearest-neighbor search and PCA normals.
//! - [`shapes`]: procedural meshes used as a zero-data training source.
//! - [`diffnet`]: a small reverse-mode differentiation tape with the dense
//!   primitives the network needs, a parameter store and Adam.
//! - [`model`]: the global encoder, the feature-change metric, the folding
//!   decoder and the normal head.
//! - [`losses`]: local-region selection and every training objective.
//! - [`solver`]: the inverse-compositional Lucas-Kanade solver over
//!   descriptors and a point-to-point ICP baseline.
//! - [`trainer`]: dataset construction and the alternating training epoch.
//! - [`metrics`]: recall and RMSE/MAE tables over registration records.
//!
//! File formats, checkpoints, configuration files and the command line live
//! in the companion `dvd` crate.

#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod cloud;
pub mod diffnet;
pub mod error;
pub mod geom3d;
pub mod linalg;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod shapes;
pub mod solver;
pub mod trainer;

pub use cloud::{NeighborIndex, PointCloud, TriangleMesh};
pub use error::{Error, Result};
pub use geom3d::{RigidTransform, Twist};
pub use linalg::{Mat3, Vec3};
pub use model::{Descriptor, Model, ModelConfig};
pub use solver::{RegistrationResult, SolverConfig};
