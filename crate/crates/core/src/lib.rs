//! Core library for resolution-generalizing diffusion transformers built on
//! two-dimensional randomized positional encodings (RPE-2D).
//!
//! The crate is organized around the training/sampling pipeline:
//!
//! - [`numerics`]: dense f32 tensors, a tape-based reverse-mode autodiff
//!   graph, and an AdamW optimizer. Generic over [`real::Real`] so gradient
//!   audits can run in f64.
//! - [`posenc`]: sinusoidal and rotary positional encodings plus the
//!   extrapolation baselines (Ext, PI, NTK).
//! - [`rpe2d`]: randomized 2D position sampling (grid, equispaced, naive)
//!   and the deterministic maximally-equidistant test assignment.
//! - [`conditioning`]: crop/resize augmentation with micro-conditioning.
//! - [`model`]: a small diffusion transformer with adaLN-Zero blocks and
//!   RoPE-2D attention over explicit position grids.
//! - [`diffusion`]: DDPM schedule, training loss, ancestral sampler with
//!   classifier-free guidance, attention scale, and timestep shift.
//! - [`data_eval`]: procedural synthetic datasets with known statistics and
//!   spectral/histogram evaluation metrics.
//! - [`config`] / [`checkpoint`] / [`train`]: run configuration, bit-exact
//!   persistence, and the training loop.

pub mod checkpoint;
pub mod conditioning;
pub mod config;
pub mod data_eval;
pub mod diffusion;
pub mod error;
pub mod model;
pub mod numerics;
pub mod posenc;
pub mod real;
pub mod rng;
pub mod rpe2d;
pub mod train;

pub use error::CoreError;
pub use rng::SeededRng;
