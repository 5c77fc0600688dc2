//! Motion-aware camera localization and space-time radiance fields for dynamic scenes.
//!
//! The crate is split along the processing chain:
//!
//! * [`geometry`] — SE(3) poses, pinhole projection and dense reprojection.
//! * [`ba`] — frame graph construction and masked dense bundle adjustment.
//! * [`mask`] — motion segmentation from ego-motion-compensated flow.
//! * [`localize`] — two-pass localization: robust solve, segment, masked re-solve.
//! * [`field`] — the six-plane factorized 4D feature volume and its decoders.
//! * [`render`] — ray casting, volumetric compositing, losses and training.
//! * [`metrics`] — trajectory alignment, ATE-RMS, PSNR and SSIM.
//! * [`synth`] — synthetic dynamic scenes with exact ground truth.
//! * [`io`] — file formats, run configuration and datasets on disk.
//! * [`cli`] — the `hexslam` command-line front end.

pub mod ba;
pub mod cli;
pub mod field;
pub mod geometry;
pub mod grid;
pub mod io;
pub mod localize;
pub mod mask;
pub mod metrics;
pub mod render;
pub mod synth;
