//! Recursive coarse-to-fine reconstruction of hyperspectral cubes from RGB.
//!
//! A cube with `K = nᵐ` bands is produced by `m` levels of small U-Net
//! generators. Each level refines every band interval of the previous level
//! into `n` narrower ones, conditioned on the RGB image and the nearest
//! previously generated bands. The generators are built from residual blocks
//! around a band-masked selective state-space scan.

pub mod error;
pub mod fractal;
pub mod metrics;
pub mod net;
pub mod numerics;
pub mod simdata;
pub mod ssm;
pub mod train;

pub use error::{FrnError, Result};
pub use numerics::{Graph, Real, Tensor, Var};
