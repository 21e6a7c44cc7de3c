//! Unsupervised dense 3D shape correspondence with uncertainty.
//!
//! A branched implicit function maps 3D points to probabilistic part-embedding
//! vectors (PEVs); an inverse function maps PEVs back to 3D space. Both are
//! trained jointly with occupancy, self-reconstruction, and cross-reconstruction
//! losses. Inference yields point-to-point correspondences with confidence
//! scores, non-existence detection, unsupervised segmentation, and shape
//! reconstruction.
//!
//! Module map:
//! - [`geometry`]: meshes, voxelization, point sampling, neighborhood queries,
//!   marching cubes.
//! - [`synth`]: procedural shape families with ground-truth correspondence.
//! - [`archive`]: on-disk shape archives (manifest + binary arrays).
//! - [`tape`]: reverse-mode autodiff over `ndarray` used by training.
//! - [`nets`]: encoder, branched implicit function, inverse function.
//! - [`losses`]: occupancy, self- and cross-reconstruction objectives.
//! - [`hungarian`]: exact optimal-assignment solver (EMD, IoU matching).
//! - [`train`]: three-stage trainer, Adam, checkpoints.
//! - [`infer`]: dense correspondence, segmentation, reconstruction, transfer.
//! - [`eval`]: metric suite and report emission.

pub mod archive;
pub mod eval;
pub mod geometry;
pub mod hungarian;
pub mod infer;
pub mod losses;
pub mod nets;
pub mod synth;
pub mod tape;
pub mod train;

pub use geometry::{Mesh, OccupancyGrid, OccupancySamples, SurfaceSamples};

pub use synth::{FamilySpec, ShapeRecord};
