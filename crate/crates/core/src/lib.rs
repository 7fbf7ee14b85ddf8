//! Canonical-space multi-view reconstruction feeding a latent flow-matching
//! shape generator.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`]: similarity transforms, pinhole cameras, depth/point maps.
//! * [`sampling`] and [`spatial`]: FPS, two-stage sampling, k-d tree queries.
//! * [`align`]: weighted Sim(3) Procrustes, view canonicalization, Sim(3)-ICP.
//! * [`world`]: SDF primitives, sphere-traced rendering and a noisy
//!   reconstruction simulator that produces fully labeled scenes.
//! * [`nn`]: a small reverse-mode autodiff engine with transformer blocks.
//! * [`recon`]: the trainable multi-view, multi-head toy reconstructor.
//! * [`generator`]: shape autoencoder, conditioning builders, flow matching,
//!   marching cubes.
//! * [`metrics`]: mesh, pose and depth evaluation.
//! * [`io`]: PLY/OBJ/raw-grid/checkpoint formats.
//! * [`experiment`]: dataset splits and the evaluation loops used by the CLI.
//! * [`pipeline`]: persisted stages (data, training, generation, evaluation,
//!   ablations) with hashed manifests.

pub mod align;
pub mod error;
pub mod experiment;
pub mod generator;
pub mod geometry;
pub mod io;
pub mod mesh;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod recon;
pub mod sampling;
pub mod spatial;
pub mod world;

pub use error::{Error, Result};
pub use geometry::{CameraModel, DepthMap, ImageSize, OrientedPointSet, PointCloud, PointMap, Sim3Transform, Vec3};
