//! Motion segmentation from ego-motion-compensated optical flow.
//!
//! The camera-induced flow is predicted from the relative pose and the source
//! frame's inverse depth; whatever observed flow it fails to explain is
//! attributed to independently moving objects. The threshold in `(0, 1)` is a
//! probability level: static residual magnitudes are modelled as Rayleigh
//! distributed with a scale fitted to the median residual of the frame, and a
//! pixel is dynamic when its residual lies beyond that level's quantile and
//! above an absolute floor.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ba::{motion_only_ba, BaConfig, BaError, FlowEstimate};
use crate::geometry::{reproject_point, CameraIntrinsics, InverseDepthMap, PoseSE3};
use crate::grid::{coverage, FlowField, Grid};

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("no valid residuals to segment")]
    EmptyInput,
    #[error(transparent)]
    Ba(#[from] BaError),
}

/// Per-pixel dynamic flag (`true` = dynamic).
#[derive(Clone, Debug, PartialEq)]
pub struct MotionMask {
    pub grid: Grid<bool>,
    pub coverage: f64,
}

impl MotionMask {
    pub fn new(grid: Grid<bool>) -> Self {
        let coverage = coverage(&grid);
        Self { grid, coverage }
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self::new(Grid::filled(width, height, false))
    }
}

/// Externally supplied class-based mask.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticMask {
    pub grid: Grid<bool>,
    pub classes: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskConfig {
    pub threshold_init: f64,
    pub threshold_final: f64,
    pub refinement_passes: usize,
    /// Masks covering more than this fraction of the frame are discarded.
    pub max_dynamic_fraction: f64,
    /// Residuals at or below this many pixels are never dynamic.
    pub residual_floor: f64,
    /// Robust scale (pixels) of the solves that masks are computed from: the
    /// unmasked pre-solve and the pose estimates inside [`refine`].
    pub presolve_robust_scale: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            threshold_init: 0.95,
            threshold_final: 0.98,
            refinement_passes: 2,
            max_dynamic_fraction: 0.5,
            residual_floor: 0.5,
            presolve_robust_scale: 0.5,
        }
    }
}

impl MaskConfig {
    pub fn validate(&self) -> Result<(), MaskError> {
        let ok = self.threshold_init > 0.0
            && self.threshold_init <= self.threshold_final
            && self.threshold_final < 1.0
            && self.refinement_passes >= 1
            && self.max_dynamic_fraction > 0.0
            && self.max_dynamic_fraction <= 1.0
            && self.residual_floor >= 0.0
            && self.presolve_robust_scale >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(MaskError::InvalidArgument(format!("invalid mask config {self:?}")))
        }
    }

    /// Threshold used after refinement pass `pass` (pass 0 is the initial segmentation).
    pub fn threshold_at(&self, pass: usize) -> f64 {
        if pass == 0 {
            return self.threshold_init;
        }
        let s = pass as f64 / self.refinement_passes as f64;
        self.threshold_init + (self.threshold_final - self.threshold_init) * s.min(1.0)
    }
}

/// Residual magnitude per pixel with validity.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMap {
    pub values: Grid<f64>,
    pub valid: Grid<bool>,
}

/// Flow induced by camera motion `relative` (source to target) over static geometry.
pub fn ego_flow(
    relative: &PoseSE3,
    depth: &InverseDepthMap,
    k: &CameraIntrinsics,
) -> Result<FlowField, MaskError> {
    if depth.width() != k.width || depth.height() != k.height {
        return Err(MaskError::InvalidArgument(
            "depth map does not match camera".into(),
        ));
    }
    let mut out = FlowField::zeros(k.width, k.height);
    for i in 0..out.vectors.len() {
        let (x, y) = out.vectors.coords(i);
        let p = nalgebra::Vector2::new(x as f64, y as f64);
        let r = depth.at(i).map(|d| reproject_point(relative, k, &p, d));
        match r {
            Some(Ok(q)) => out.vectors.as_mut_slice()[i] = q - p,
            _ => out.valid.as_mut_slice()[i] = false,
        }
    }
    Ok(out)
}

/// Euclidean norm of `observed − ego`, invalid where either flow is invalid.
pub fn motion_residual(observed: &FlowField, ego: &FlowField) -> Result<ResidualMap, MaskError> {
    if !observed.vectors.same_shape(&ego.vectors)
        || !observed.valid.same_shape(&observed.vectors)
        || !ego.valid.same_shape(&ego.vectors)
    {
        return Err(MaskError::InvalidArgument("flow shapes differ".into()));
    }
    let (w, h) = (observed.width(), observed.height());
    let values = Grid::from_fn(w, h, |x, y| (observed.vectors.get(x, y) - ego.vectors.get(x, y)).norm());
    let valid = Grid::from_fn(w, h, |x, y| *observed.valid.get(x, y) && *ego.valid.get(x, y));
    Ok(ResidualMap { values, valid })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Residual magnitude beyond which a pixel is dynamic at probability level `threshold`.
pub fn residual_cutoff(residual: &ResidualMap, threshold: f64, floor: f64) -> Result<f64, MaskError> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(MaskError::InvalidArgument(format!(
            "threshold {threshold} outside (0, 1)"
        )));
    }
    let mut valid: Vec<f64> = residual
        .values
        .iter()
        .zip(residual.valid.iter())
        .filter(|(_, &v)| v)
        .map(|(&r, _)| r)
        .collect();
    if valid.is_empty() {
        return Err(MaskError::EmptyInput);
    }
    // Rayleigh: median = σ √(2 ln 2), quantile(τ) = σ √(−2 ln(1 − τ)).
    let sigma = median(&mut valid) / (2.0 * std::f64::consts::LN_2).sqrt();
    let quantile = sigma * (-2.0 * (1.0 - threshold).ln()).sqrt();
    Ok(quantile.max(floor))
}

/// Marks pixels whose residual strictly exceeds the cutoff.
pub fn segment(residual: &ResidualMap, threshold: f64, floor: f64) -> Result<MotionMask, MaskError> {
    let cutoff = residual_cutoff(residual, threshold, floor)?;
    let grid = Grid::from_fn(residual.values.width(), residual.values.height(), |x, y| {
        *residual.valid.get(x, y) && *residual.values.get(x, y) > cutoff
    });
    Ok(MotionMask::new(grid))
}

/// Result of alternating pose estimation and segmentation.
#[derive(Clone, Debug)]
pub struct RefineOutcome {
    pub mask: MotionMask,
    pub pose: PoseSE3,
    /// Mask from the initial pose at the initial threshold.
    pub initial_mask: MotionMask,
    /// Pose after each refinement pass.
    pub pass_poses: Vec<PoseSE3>,
    /// Set when the inner pose estimate failed and the initial result was kept.
    pub degenerate: bool,
}

fn segment_with_pose(
    observed: &FlowField,
    pose: &PoseSE3,
    depth: &InverseDepthMap,
    k: &CameraIntrinsics,
    threshold: f64,
    floor: f64,
) -> Result<MotionMask, MaskError> {
    let ego = ego_flow(pose, depth, k)?;
    segment(&motion_residual(observed, &ego)?, threshold, floor)
}

/// Alternates motion-only pose estimation (excluding the current mask) with
/// re-segmentation at a threshold rising from `threshold_init` to `threshold_final`.
///
/// `initial` is the relative pose source → target. On a degenerate inner
/// estimate the pass-0 mask and the initial pose are returned, flagged.
pub fn refine(
    flow: &FlowEstimate,
    initial: &PoseSE3,
    depth: &InverseDepthMap,
    k: &CameraIntrinsics,
    config: &MaskConfig,
    ba: &BaConfig,
) -> Result<RefineOutcome, MaskError> {
    config.validate()?;
    // The first mask may miss part of the mover; a robust cost keeps those
    // pixels from dragging the pose.
    let ba = &BaConfig {
        robust_scale: ba.robust_scale.max(config.presolve_robust_scale),
        ..ba.clone()
    };
    let observed = flow.to_flow_field();
    let initial_mask = segment_with_pose(
        &observed,
        initial,
        depth,
        k,
        config.threshold_init,
        config.residual_floor,
    )?;
    let mut mask = initial_mask.clone();
    let mut pose = *initial;
    let mut pass_poses = Vec::with_capacity(config.refinement_passes);
    for pass in 1..=config.refinement_passes {
        let estimate = motion_only_ba(
            k,
            &PoseSE3::identity(),
            depth,
            &pose,
            flow,
            Some(&mask.grid),
            ba,
            pass,
        );
        pose = match estimate {
            Ok(p) => p,
            Err(BaError::DegenerateFrame { .. }) => {
                return Ok(RefineOutcome {
                    mask: initial_mask.clone(),
                    pose: *initial,
                    initial_mask,
                    pass_poses,
                    degenerate: true,
                });
            }
            Err(e) => return Err(e.into()),
        };
        pass_poses.push(pose);
        mask = segment_with_pose(
            &observed,
            &pose,
            depth,
            k,
            config.threshold_at(pass),
            config.residual_floor,
        )?;
    }
    Ok(RefineOutcome {
        mask,
        pose,
        initial_mask,
        pass_poses,
        degenerate: false,
    })
}

/// Replaces masks covering more than `max_dynamic_fraction` with an empty mask.
/// The flag reports whether the discard fired.
pub fn discard_if_excessive(mask: &MotionMask, config: &MaskConfig) -> (MotionMask, bool) {
    if mask.coverage > config.max_dynamic_fraction {
        (
            MotionMask::empty(mask.grid.width(), mask.grid.height()),
            true,
        )
    } else {
        (mask.clone(), false)
    }
}

/// Pointwise OR of the motion mask with an optional semantic mask.
pub fn combine(motion: &MotionMask, semantic: Option<&SemanticMask>) -> Result<MotionMask, MaskError> {
    let Some(semantic) = semantic else {
        return Ok(motion.clone());
    };
    if !motion.grid.same_shape(&semantic.grid) {
        return Err(MaskError::InvalidArgument(format!(
            "semantic mask {}x{} vs motion mask {}x{}",
            semantic.grid.width(),
            semantic.grid.height(),
            motion.grid.width(),
            motion.grid.height()
        )));
    }
    let grid = Grid::from_fn(motion.grid.width(), motion.grid.height(), |x, y| {
        *motion.grid.get(x, y) || *semantic.grid.get(x, y)
    });
    Ok(MotionMask::new(grid))
}
