//! Weakly supervised, segmentation-attention deformable registration of 3D
//! volumes.
//!
//! The crate is organised bottom-up:
//!
//! * [`volume`] grids, displacement fields, trilinear sampling and warping
//! * [`filters`] Laplacian-of-Gaussian filtering
//! * [`losses`] focal, local cross-correlation, mutual information and
//!   smoothness losses with hand-derived adjoints
//! * [`roi`] landmark patch masks used as weak segmentation targets
//! * [`nn`] and [`models`] a small CPU U-Net stack and the three-network
//!   composite (two segmentation nets feeding one registration net)
//! * [`training`] affine self-registration pretraining and pair training
//! * [`evaluation`] landmark error metrics and aggregate reports
//! * [`io`] NIfTI-1, landmark CSV, manifests and the synthetic case generator
//! * [`config`] and [`cli`] the run configuration and command-line surface
//!
//! Inner loops run on rayon when the `parallel` feature is enabled (default)
//! and fall back to plain iterators otherwise. Reductions are chunked with a
//! fixed chunk size and combined in order, so results are bitwise identical
//! across both builds and any thread count.

pub mod cli;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod filters;
pub mod io;
pub mod losses;
pub mod models;
pub mod nn;
pub mod par;
pub mod roi;
pub mod training;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{DisplacementField, Frame, LandmarkSet, Padding, Point, Volume};
