//! Near-field photometric stereo with point lights.
//!
//! The crate covers the full loop of a near-field photometric stereo system:
//! rendering synthetic captures under an anisotropic point-light model,
//! compensating measured intensities for per-pixel light attenuation,
//! packing the compensated samples into per-pixel observation maps,
//! regressing surface normals from those maps (least squares or a small
//! convolutional network trained from scratch), and integrating the normal
//! field into a depth map with an l1 solver in log-depth.
//!
//! Entry points:
//! - [`pipeline::reconstruct`] runs the iterative depth/normal loop on a
//!   captured image stack.
//! - [`sampler`] draws randomized virtual setups and training records.
//! - [`regressor::train`] fits the compact network on a record stream.
//! - [`calibration::calibrate`] refines LED parameters from plane captures.
//! - [`cli::run`] backs the `nearlight` binary; every subcommand is also
//!   reachable through the library API and the `examples/` directory.

pub mod calibration;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod integrator;
pub mod io;
pub mod lighting;
pub mod obsmap;
pub mod pipeline;
pub mod regressor;
pub mod render;
pub mod sampler;
pub mod scenes;

pub use error::{Error, Result};
