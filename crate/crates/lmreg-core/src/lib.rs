//! Unsupervised deformable 3D image registration with a frozen
//! language-model-style transformer bottleneck.
//!
//! The crate is organized around a small set of building blocks:
//!
//! - [`volume`]: grid-data types (scalar volumes, label maps, displacement
//!   fields) and the bit-exact `VOL1` file format.
//! - [`diff`]: a reverse-mode differentiable computation substrate with
//!   exactly the primitives the registration model needs, each one checked
//!   against central finite differences.
//! - [`warp`]: spatial-transformer warping, field composition/rescaling and
//!   Jacobian fold analysis.
//! - [`model`]: the registration network — dual pyramid encoder, adapter
//!   bridge into a frozen transformer bottleneck, multi-scale decoder stages
//!   and cascaded refinement decoders.
//! - [`objective`]: the unsupervised loss (MSE similarity + diffusion
//!   regularization).
//! - [`train`]: Adam optimization loop, cascade schedules, checkpointing.
//! - [`eval`]: Dice / fold-fraction / timing metrics and report emission.
//! - [`synth`]: deterministic synthetic dataset generator with known
//!   ground-truth fields.
//!
//! Inner voxel loops are data-parallel via rayon when the `parallel` feature
//! (default) is enabled; every parallel loop writes disjoint output chunks
//! with a fixed per-element operation order, so results are bitwise identical
//! to the sequential fallback.

pub mod diff;
pub mod eval;
pub mod exec;
pub mod model;
pub mod objective;
pub mod synth;
pub mod train;
pub mod volume;
pub mod warp;
