//! Synthesizes polynomial wide-angle distortion, rectifies it back, and
//! "rectangles" the resulting deformed-boundary images by fitting a
//! thin-plate-spline control mesh through staged energy minimization.
//!
//! The pipeline at a glance:
//!
//! * [`distortion`] — polynomial radial camera model: synthesize wide-angle
//!   images from rectilinear ones and rectify them back, producing images
//!   whose valid content has a deformed (non-rectangular) boundary.
//! * [`tps`] — thin-plate-spline solver, evaluator, bending energy, and
//!   dense backward warping.
//! * [`mesh`] — regular control grids, the inter-grid co-linearity energy,
//!   piecewise-bilinear mesh warping, and mesh file I/O.
//! * [`rectangler`] — fits a control mesh that stretches the valid region
//!   of a deformed-boundary image onto a full rectangle, minimizing an
//!   appearance + inter-grid + bending energy over a similarity →
//!   homography → free-grid stage schedule.
//! * [`curriculum`] — dataset generator for the three stages with exact
//!   planted ground truth.
//! * [`metrics`] — PSNR, SSIM, mesh RMSE, flow endpoint error, and flow
//!   color rendering.
//! * [`raster`] — image containers, PPM/PGM I/O, and bilinear sampling.

pub mod curriculum;
pub mod distortion;
pub mod mesh;
pub mod metrics;
pub mod raster;
pub mod rectangler;
pub mod tps;
