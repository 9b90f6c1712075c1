//! Self-regularized, fully automatic video colorization.
//!
//! The engine colorizes grayscale video with a two-network design: a
//! colorization network `f` produces `d` diverse candidate colorizations per
//! frame, and a confidence-guided refinement network `g` propagates color
//! between neighboring frames for temporal consistency. Training needs no
//! labels beyond the color frames themselves: the losses tie together
//! bilateral-space nearest neighbors, flow-warped temporal correspondences,
//! and a ranked perceptual diversity term.
//!
//! Modules:
//! - [`imagecore`]: image/video containers, PNG I/O, color conversions, PSNR.
//! - [`flow`]: flow fields, `.flo` I/O, backward warping, occlusion masks,
//!   and a pyramidal Horn-Schunck estimator.
//! - [`bilateral`]: KNN graphs in the 5D bilateral space and the bilateral
//!   color-consistency loss.
//! - [`neural`]: tensor autodiff tape, the colorizer and refiner U-Nets, the
//!   fixed perceptual feature bank, Adam, and weight files.
//! - [`losses`]: temporal losses, confidence maps, and the diversity loss.
//! - [`synthdata`]: deterministic moving-shape clips with ground-truth color,
//!   flow, and occlusion.
//! - [`pipeline`]: two-phase training and windowed iterative inference.
//! - [`evalkit`]: PSNR / warp-error / feature-distance reports.
//! - [`config`]: the JSON run configuration shared by all CLI subcommands.

pub mod bilateral;
pub mod config;
mod error;
pub mod evalkit;
pub mod flow;
pub mod imagecore;
pub mod losses;
pub mod neural;
pub mod pipeline;
pub mod synthdata;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
