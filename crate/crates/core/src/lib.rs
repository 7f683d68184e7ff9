//! Desk-scale laboratory for studying sampling guidance in diffusion models
//! on an analytically tractable 2-D problem.
//!
//! The pieces fit together as follows: [`mixture`] builds a fractal two-class
//! Gaussian mixture with exact densities and scores at every noise level,
//! [`net`] defines a small energy-based MLP denoiser whose score is obtained
//! by differentiating a scalar energy through [`diffkit`], [`train`] fits the
//! network to the analytic score, [`guide`] combines one or two denoiser
//! evaluations into a guided denoiser (internal guidance, CFG, autoguidance,
//! and their combination), [`sampler`] integrates the probability-flow ODE
//! with the deterministic EDM Heun scheme, and [`eval`] measures sample
//! quality against the known ground truth and renders figures.

pub mod diffkit;
pub mod error;
pub mod eval;
pub mod guide;
pub mod mixture;
pub mod net;
pub mod sampler;
pub mod train;

pub use error::{Error, Result};
