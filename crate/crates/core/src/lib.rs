//! Desk-scale multi-pinhole SPECT reconstruction with diffusion priors.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] and [`sysmat`] describe the stationary scanner and its
//!   explicit sparse system matrix.
//! * [`phantom`] produces synthetic cardiac activity, an anatomy surrogate
//!   and Poisson projection data under dose and view reduction.
//! * [`recon`] holds MLEM, the Poisson likelihood and z-axis TV solvers.
//! * [`diffusion`] and [`denoiser`] implement the DDPM/DDIM algebra and the
//!   conditional noise predictors.
//! * [`sampler`] fuses them into the guided volume sampler.
//! * [`metrics`] scores reconstructions.
//! * [`pipeline`] wires the pieces together for the command line.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop, clippy::too_many_arguments)]

pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod error;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod recon;
pub mod rng;
pub mod sampler;
pub mod sysmat;
pub mod volume;

pub use error::{Error, Result};
pub use geometry::{DetectorSpec, Row, ScannerGeometry, ViewSubset};
pub use sysmat::SystemMatrix;
pub use volume::{ImageVolume, ProjectionData, VoxelGrid};
