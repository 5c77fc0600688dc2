//! Ray casting and emission–absorption compositing.
//!
//! Samples are stratified between the entry and exit of the field's bounding
//! box. With densities `σ_k` and segment lengths `δ_k`,
//! `α_k = 1 − exp(−σ_k δ_k)`, `w_k = α_k Π_{l<k}(1 − α_l)` and `C = Σ w_k c_k`.
//! There is no background term: whatever light is left over is black.

mod loss;
mod optim;
mod train;

use nalgebra::{Vector2, Vector3};
use rand::Rng;
use thiserror::Error;

use crate::field::{Bounds, FieldError};
use crate::geometry::{CameraIntrinsics, PoseSE3};

pub use loss::{
    loss_rgb, loss_tv_plane, loss_tv_spatial, loss_tv_spatiotemporal, total_loss, tv_losses, LossBreakdown, LossWeights,
    TvLosses,
};
pub use optim::Adam;
pub use train::{
    batch_loss, is_holdout, render_image, render_ray, scene_bounds, train, view_ray, HoldoutView, RayScratch, TrainConfig, TrainLogRecord, TrainOutcome,
    TrainingView, UpsampleStep, LOG_HEADER,
};

#[derive(Debug, Error)]
pub enum RenderError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFinite { iteration: usize, detail: String },
    #[error(transparent)]
    Field(#[from] FieldError),
}

/// A world-space ray at a normalized time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    /// Unit length.
    pub direction: Vector3<f64>,
    pub time: f64,
    pub near: f64,
    pub far: f64,
}

/// Rays through pixel centers of a camera with camera-to-world pose `pose`.
///
/// `near`/`far` are left at `0`/`∞`; use [`clip_to_bounds`] before sampling.
pub fn generate_rays(
    k: &CameraIntrinsics,
    pose: &PoseSE3,
    pixels: &[(usize, usize)],
    time: f64,
) -> Result<Vec<Ray>, RenderError> {
    pixels
        .iter()
        .map(|&(x, y)| {
            if x >= k.width || y >= k.height {
                return Err(RenderError::InvalidArgument(format!(
                    "pixel ({x}, {y}) outside {}×{}",
                    k.width, k.height
                )));
            }
            let d = pose.rotation * k.ray(&Vector2::new(x as f64, y as f64));
            Ok(Ray {
                origin: pose.translation,
                direction: d.normalize(),
                time,
                near: 0.0,
                far: f64::INFINITY,
            })
        })
        .collect()
}

/// Entry and exit distances of a ray through the spatial part of `bounds`.
pub fn intersect_bounds(origin: &Vector3<f64>, dir: &Vector3<f64>, bounds: &Bounds) -> Option<(f64, f64)> {
    let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
    for a in 0..3 {
        if dir[a] == 0.0 {
            if origin[a] < bounds.min[a] || origin[a] > bounds.max[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let (mut lo, mut hi) = ((bounds.min[a] - origin[a]) * inv, (bounds.max[a] - origin[a]) * inv);
        if lo > hi {
            std::mem::swap(&mut lo, &mut hi);
        }
        t0 = t0.max(lo);
        t1 = t1.min(hi);
    }
    (t1 > t0 && t1 > 0.0).then_some((t0, t1))
}

/// Restricts `ray` to the part inside `bounds` beyond `min_near`; `None` if empty.
pub fn clip_to_bounds(ray: &Ray, bounds: &Bounds, min_near: f64) -> Option<Ray> {
    let (t0, t1) = intersect_bounds(&ray.origin, &ray.direction, bounds)?;
    let near = t0.max(ray.near).max(min_near);
    let far = t1.min(ray.far);
    (far > near).then_some(Ray { near, far, ..*ray })
}

/// Sample distances and segment lengths along `[near, far]`.
///
/// With `jitter` each sample is uniform inside its bin, otherwise it sits at the
/// bin center. `δ_k = t_{k+1} − t_k`, and the last segment runs to `far`.
pub fn stratified_samples(near: f64, far: f64, count: usize, jitter: Option<&mut dyn rand::RngCore>) -> (Vec<f64>, Vec<f64>) {
    let bin = (far - near) / count as f64;
    let ts: Vec<f64> = match jitter {
        Some(rng) => (0..count)
            .map(|k| near + (k as f64 + rng.random::<f64>()) * bin)
            .collect(),
        None => (0..count).map(|k| near + (k as f64 + 0.5) * bin).collect(),
    };
    let deltas = (0..count)
        .map(|k| if k + 1 < count { ts[k + 1] - ts[k] } else { far - ts[k] })
        .collect();
    (ts, deltas)
}

/// Result of compositing one ray.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub rgb: [f64; 3],
    pub sample_weights: Vec<f64>,
    pub expected_depth: f64,
    pub transmittance_final: f64,
}

/// Composites samples front to back. `depths` may be empty, in which case the
/// expected depth is reported as zero.
pub fn composite(
    densities: &[f64],
    colors: &[[f64; 3]],
    deltas: &[f64],
    depths: &[f64],
) -> Result<RenderOutput, RenderError> {
    let n = densities.len();
    if colors.len() != n || deltas.len() != n || !(depths.is_empty() || depths.len() == n) {
        return Err(RenderError::InvalidArgument("sample arrays differ in length".into()));
    }
    if densities.iter().any(|s| !s.is_finite() || *s < 0.0)
        || deltas.iter().any(|d| !d.is_finite() || *d <= 0.0)
        || colors.iter().flatten().any(|c| !c.is_finite())
    {
        return Err(RenderError::InvalidArgument(
            "densities must be finite and ≥ 0, deltas finite and > 0".into(),
        ));
    }
    let mut weights = Vec::with_capacity(n);
    let mut transmittance = 1.0;
    let mut rgb = [0.0; 3];
    let mut depth = 0.0;
    for k in 0..n {
        let survive = (-densities[k] * deltas[k]).exp();
        let w = transmittance * (1.0 - survive);
        for c in 0..3 {
            rgb[c] += w * colors[k][c];
        }
        if !depths.is_empty() {
            depth += w * depths[k];
        }
        weights.push(w);
        transmittance *= survive;
    }
    Ok(RenderOutput {
        rgb,
        sample_weights: weights,
        expected_depth: depth,
        transmittance_final: transmittance,
    })
}

/// Gradients of `dC · C` with respect to each sample's density and color.
///
/// `∂C/∂σ_k = δ_k (T_{k+1} c_k − Σ_{l>k} w_l c_l)` and `∂C/∂c_k = w_k`.
pub fn composite_backward(
    out: &RenderOutput,
    colors: &[[f64; 3]],
    deltas: &[f64],
    d_rgb: &[f64; 3],
    d_density: &mut [f64],
    d_color: &mut [[f64; 3]],
) {
    let n = colors.len();
    let weights = &out.sample_weights;
    // Transmittance after sample k is T_{k+1} = T_final / Π_{l>k}(1 − α_l); walk
    // backwards accumulating the tail sum instead of dividing.
    let mut tail = 0.0; // Σ_{l>k} w_l (dC · c_l)
    let mut t_next = out.transmittance_final;
    for k in (0..n).rev() {
        let dot = d_rgb[0] * colors[k][0] + d_rgb[1] * colors[k][1] + d_rgb[2] * colors[k][2];
        d_density[k] = deltas[k] * (t_next * dot - tail);
        d_color[k] = d_rgb.map(|g| g * weights[k]);
        tail += weights[k] * dot;
        t_next += weights[k];
    }
}
