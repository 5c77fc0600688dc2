//! Coarse-to-fine fitting of a [`HexPlaneField`] to posed images.

use std::io::Write;

use log::{debug, info};
use nalgebra::{Vector2, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_rgb, tv_losses, LossBreakdown, LossWeights};
use super::optim::Adam;
use super::{clip_to_bounds, composite, composite_backward, stratified_samples, Ray, RenderError, RenderOutput};
use crate::field::{Bounds, FieldGradients, HexPlaneField, PointTrace, Resolution};
use crate::geometry::{CameraIntrinsics, PoseSE3};
use crate::grid::RgbImage;
use crate::metrics::psnr;

pub const LOG_HEADER: &str = "iter,loss,l_rgb,l_tv_sigma,l_tv_rgb,psnr_holdout";

/// Grid resolution switch at a given iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpsampleStep {
    pub iteration: usize,
    pub spatial: usize,
    pub temporal: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the total-variation terms; halved (see `tv_decay`) at every upsample.
    pub lambda_tv: f64,
    /// Extra weight on differences along time.
    pub lambda_ts: f64,
    /// Weight of color-feature total variation relative to density-feature.
    pub w_rgb_tv: f64,
    pub tv_decay: f64,
    pub batch_size: usize,
    pub samples_per_ray: usize,
    pub iterations: usize,
    pub upsample_schedule: Vec<UpsampleStep>,
    pub lr_grid: f64,
    pub lr_decoder: f64,
    /// Step sizes decay exponentially to this fraction by the last iteration.
    pub lr_final_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Closest sample distance from the camera.
    pub near: f64,
    /// Viewing depth used to derive the scene box from the cameras.
    pub far: f64,
    /// Held-out PSNR period in iterations; 0 evaluates only at the end.
    pub holdout_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_tv: 0.005,
            lambda_ts: 20.0,
            w_rgb_tv: 0.1,
            tv_decay: 0.5,
            batch_size: 256,
            samples_per_ray: 64,
            iterations: 3000,
            upsample_schedule: vec![
                UpsampleStep {
                    iteration: 500,
                    spatial: 48,
                    temporal: 24,
                },
                UpsampleStep {
                    iteration: 1000,
                    spatial: 64,
                    temporal: 32,
                },
            ],
            lr_grid: 0.02,
            lr_decoder: 0.001,
            lr_final_fraction: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            near: 0.05,
            far: 12.0,
            holdout_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), RenderError> {
        let positive = [
            ("lambda_ts", self.lambda_ts),
            ("lr_grid", self.lr_grid),
            ("lr_decoder", self.lr_decoder),
            ("lr_final_fraction", self.lr_final_fraction),
            ("tv_decay", self.tv_decay),
            ("far", self.far),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(RenderError::InvalidArgument(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("lambda_tv", self.lambda_tv), ("w_rgb_tv", self.w_rgb_tv), ("near", self.near)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(RenderError::InvalidArgument(format!("{name} must be ≥ 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(RenderError::InvalidArgument("Adam betas must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.samples_per_ray == 0 {
            return Err(RenderError::InvalidArgument("batch size and samples per ray must be positive".into()));
        }
        if self.upsample_schedule.windows(2).any(|w| w[1].iteration <= w[0].iteration) {
            return Err(RenderError::InvalidArgument("upsample iterations must increase".into()));
        }
        Ok(())
    }

    pub fn loss_weights(&self, lambda_tv: f64) -> LossWeights {
        LossWeights {
            lambda_tv,
            lambda_ts: self.lambda_ts,
            w_rgb_tv: self.w_rgb_tv,
        }
    }
}

/// Whether `frame` is held out when every `every`-th frame is reserved for
/// evaluation (`frame mod every = every / 2`, so held-out frames are interior).
pub fn is_holdout(frame: usize, every: usize) -> bool {
    every > 0 && frame % every == every / 2
}

/// An image with its camera-to-world pose and normalized time in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct TrainingView {
    pub image: RgbImage,
    pub pose: PoseSE3,
    pub time: f64,
}

pub type HoldoutView = TrainingView;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub iteration: usize,
    pub loss: LossBreakdown,
    pub psnr_holdout: Option<f64>,
}

impl TrainLogRecord {
    /// One `iter,loss,l_rgb,l_tv_sigma,l_tv_rgb,psnr_holdout` line; PSNR is blank when not evaluated.
    pub fn to_line(&self) -> String {
        let psnr = self.psnr_holdout.map(|p| format!("{p:.4}")).unwrap_or_default();
        format!(
            "{},{:.8e},{:.8e},{:.8e},{:.8e},{psnr}",
            self.iteration, self.loss.total, self.loss.rgb, self.loss.tv_sigma, self.loss.tv_rgb
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub field: HexPlaneField,
    pub log: Vec<TrainLogRecord>,
    /// PSNR over the held-out views after the last iteration.
    pub final_psnr: Option<f64>,
}

/// Scene box spanning every camera center and every view frustum out to depth `far`, over times `[0, 1]`.
pub fn scene_bounds(k: &CameraIntrinsics, poses: &[PoseSE3], far: f64) -> Result<Bounds, RenderError> {
    if poses.is_empty() {
        return Err(RenderError::InvalidArgument("no cameras".into()));
    }
    let (w, h) = (k.width as f64 - 0.5, k.height as f64 - 0.5);
    let corners = [(-0.5, -0.5), (w, -0.5), (-0.5, h), (w, h)];
    let mut min = [f64::INFINITY; 4];
    let mut max = [f64::NEG_INFINITY; 4];
    for pose in poses {
        let mut points = vec![pose.translation];
        points.extend(
            corners
                .iter()
                .map(|&(x, y)| pose.transform_point(&(k.ray(&Vector2::new(x, y)) * far))),
        );
        for p in points {
            for a in 0..3 {
                min[a] = min[a].min(p[a]);
                max[a] = max[a].max(p[a]);
            }
        }
    }
    (min[3], max[3]) = (0.0, 1.0);
    let bounds = Bounds { min, max };
    bounds.validate()?;
    Ok(bounds)
}

/// Renders one ray, keeping per-sample traces for a later backward pass.
pub fn render_ray(
    field: &HexPlaneField,
    ray: &Ray,
    samples: usize,
    jitter: Option<&mut dyn RngCore>,
    scratch: &mut RayScratch,
) -> Result<RenderOutput, RenderError> {
    let Some(ray) = clip_to_bounds(ray, &field.bounds, ray.near) else {
        scratch.deltas.clear();
        return Ok(RenderOutput {
            rgb: [0.0; 3],
            sample_weights: Vec::new(),
            expected_depth: 0.0,
            transmittance_final: 1.0,
        });
    };
    let (ts, deltas) = stratified_samples(ray.near, ray.far, samples, jitter);
    scratch.traces.resize_with(samples, PointTrace::default);
    scratch.densities.resize(samples, 0.0);
    scratch.colors.resize(samples, [0.0; 3]);
    let dir = [ray.direction.x, ray.direction.y, ray.direction.z];
    for (k, &t) in ts.iter().enumerate() {
        let p: Vector3<f64> = ray.origin + ray.direction * t;
        let coords = field.bounds.normalize([p.x, p.y, p.z, ray.time]);
        let trace = &mut scratch.traces[k];
        field.evaluate(coords, &dir, trace)?;
        scratch.densities[k] = trace.density;
        scratch.colors[k] = trace.rgb;
    }
    let out = composite(&scratch.densities, &scratch.colors, &deltas, &ts)?;
    scratch.deltas = deltas;
    Ok(out)
}

/// Reusable buffers for [`render_ray`].
#[derive(Clone, Debug, Default)]
pub struct RayScratch {
    traces: Vec<PointTrace>,
    densities: Vec<f64>,
    colors: Vec<[f64; 3]>,
    deltas: Vec<f64>,
    d_density: Vec<f64>,
    d_color: Vec<[f64; 3]>,
    plane_scratch: Vec<f64>,
}

/// Accumulates gradients of `d_rgb · C` for the ray last rendered into `scratch`.
fn backward_ray(
    field: &HexPlaneField,
    out: &RenderOutput,
    d_rgb: &[f64; 3],
    scratch: &mut RayScratch,
    grads: &mut FieldGradients,
) {
    let n = scratch.deltas.len();
    if n == 0 {
        return;
    }
    scratch.d_density.resize(n, 0.0);
    scratch.d_color.resize(n, [0.0; 3]);
    composite_backward(
        out,
        &scratch.colors[..n],
        &scratch.deltas,
        d_rgb,
        &mut scratch.d_density,
        &mut scratch.d_color,
    );
    for k in 0..n {
        field.backward(
            &scratch.traces[k],
            scratch.d_density[k],
            &scratch.d_color[k],
            grads,
            &mut scratch.plane_scratch,
        );
    }
}

/// Ray through pixel `(x, y)` of a camera with camera-to-world `pose`.
pub fn view_ray(k: &CameraIntrinsics, pose: &PoseSE3, x: usize, y: usize, time: f64, near: f64) -> Ray {
    let d = pose.rotation * k.ray(&Vector2::new(x as f64, y as f64));
    Ray {
        origin: pose.translation,
        direction: d.normalize(),
        time,
        near,
        far: f64::INFINITY,
    }
}

/// Full training objective of a ray batch: mean squared color error plus the
/// weighted TV terms. With `grads`, its gradient is accumulated there (the
/// buffer is cleared first). Without `jitter`, samples sit at bin centers.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    field: &HexPlaneField,
    rays: &[Ray],
    targets: &[[f64; 3]],
    samples: usize,
    weights: &LossWeights,
    mut jitter: Option<&mut dyn RngCore>,
    scratch: &mut RayScratch,
    mut grads: Option<&mut FieldGradients>,
) -> Result<LossBreakdown, RenderError> {
    if rays.is_empty() || rays.len() != targets.len() {
        return Err(RenderError::InvalidArgument(format!(
            "{} rays for {} targets",
            rays.len(),
            targets.len()
        )));
    }
    let b = rays.len();
    if let Some(g) = grads.as_mut() {
        g.clear();
    }
    let mut rendered = Vec::with_capacity(b);
    for (ray, gt) in rays.iter().zip(targets) {
        let out = render_ray(field, ray, samples, jitter.as_mut().map(|r| &mut **r as &mut dyn RngCore), scratch)?;
        if let Some(g) = grads.as_mut() {
            let d_rgb: [f64; 3] = std::array::from_fn(|c| 2.0 * (out.rgb[c] - gt[c]) / b as f64);
            backward_ray(field, &out, &d_rgb, scratch, g);
        }
        rendered.push(out.rgb);
    }
    let rgb = loss_rgb(&rendered, targets)?;
    let lambda_tv = weights.lambda_tv;
    let tv = if lambda_tv > 0.0 {
        tv_losses(
            field,
            weights.lambda_ts,
            b,
            grads.map(|g| (g, lambda_tv, lambda_tv * weights.w_rgb_tv)),
        )?
    } else {
        Default::default()
    };
    Ok(LossBreakdown {
        total: rgb + lambda_tv * (tv.sigma + weights.w_rgb_tv * tv.rgb),
        rgb,
        tv_sigma: tv.sigma,
        tv_rgb: tv.rgb,
    })
}

/// Renders a full image with samples at bin centers.
pub fn render_image(
    field: &HexPlaneField,
    k: &CameraIntrinsics,
    pose: &PoseSE3,
    time: f64,
    samples: usize,
    near: f64,
) -> Result<RgbImage, RenderError> {
    let mut scratch = RayScratch::default();
    let mut pixels = Vec::with_capacity(k.width * k.height);
    for y in 0..k.height {
        for x in 0..k.width {
            let ray = view_ray(k, pose, x, y, time, near);
            let out = render_ray(field, &ray, samples, None, &mut scratch)?;
            pixels.push(out.rgb.map(|c| c.clamp(0.0, 1.0)));
        }
    }
    Ok(RgbImage::from_vec(k.width, k.height, pixels).expect("pixel count matches"))
}

fn mean_psnr(field: &HexPlaneField, k: &CameraIntrinsics, views: &[HoldoutView], config: &TrainConfig) -> Result<Option<f64>, RenderError> {
    if views.is_empty() {
        return Ok(None);
    }
    let mut total = 0.0;
    for v in views {
        let img = render_image(field, k, &v.pose, v.time, config.samples_per_ray, config.near)?;
        total += psnr(&img, &v.image).map_err(|e| RenderError::InvalidArgument(e.to_string()))?;
    }
    Ok(Some(total / views.len() as f64))
}

/// Fits `field` to `views`, logging one line per iteration to `log` if given.
pub fn train(
    mut field: HexPlaneField,
    views: &[TrainingView],
    holdout: &[HoldoutView],
    k: &CameraIntrinsics,
    config: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainOutcome, RenderError> {
    config.validate()?;
    if config.iterations > 0 && views.is_empty() {
        return Err(RenderError::InvalidArgument("no training views".into()));
    }
    for v in views.iter().chain(holdout) {
        if v.image.width() != k.width || v.image.height() != k.height {
            return Err(RenderError::InvalidArgument("image size differs from intrinsics".into()));
        }
    }
    let write_err = |e: std::io::Error| RenderError::InvalidArgument(format!("training log: {e}"));
    if let Some(w) = log.as_mut() {
        writeln!(w, "{LOG_HEADER}").map_err(write_err)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(&field, config.beta1, config.beta2);
    let mut grads = FieldGradients::zeros_like(&field);
    let mut lambda_tv = config.lambda_tv;
    let mut scratch = RayScratch::default();
    let mut records = Vec::with_capacity(config.iterations);
    let b = config.batch_size;
    let mut rays = vec![view_ray(k, &PoseSE3::identity(), 0, 0, 0.0, config.near); b];
    let mut target = vec![[0.0; 3]; b];
    let decay = config.lr_final_fraction.ln() / config.iterations.max(1) as f64;

    for iteration in 0..config.iterations {
        for step in config.upsample_schedule.iter().filter(|s| s.iteration == iteration) {
            let res = Resolution {
                spatial: [step.spatial; 3],
                temporal: step.temporal,
            };
            field = field.upsample(res)?;
            adam = Adam::new(&field, config.beta1, config.beta2);
            grads = FieldGradients::zeros_like(&field);
            lambda_tv *= config.tv_decay;
            info!("iteration {iteration}: upsampled to {res:?}, λ_TV = {lambda_tv}");
        }
        for r in 0..b {
            let view = &views[rng.random_range(0..views.len())];
            let (x, y) = (rng.random_range(0..k.width), rng.random_range(0..k.height));
            rays[r] = view_ray(k, &view.pose, x, y, view.time, config.near);
            target[r] = *view.image.get(x, y);
        }
        let weights = config.loss_weights(lambda_tv);
        let loss = batch_loss(
            &field,
            &rays,
            &target,
            config.samples_per_ray,
            &weights,
            Some(&mut rng),
            &mut scratch,
            Some(&mut grads),
        )?;
        if !loss.total.is_finite() || grads.slices().iter().any(|s| s.iter().any(|g| !g.is_finite())) {
            return Err(RenderError::NonFinite {
                iteration,
                detail: format!("{loss:?}"),
            });
        }
        let scale = (decay * iteration as f64).exp();
        adam.update(&mut field, &grads, config.lr_grid * scale, config.lr_decoder * scale);

        let last = iteration + 1 == config.iterations;
        let evaluate = config.holdout_every > 0 && (iteration + 1) % config.holdout_every == 0;
        let psnr_holdout = if (evaluate || last) && !holdout.is_empty() {
            mean_psnr(&field, k, holdout, config)?
        } else {
            None
        };
        let record = TrainLogRecord {
            iteration,
            loss,
            psnr_holdout,
        };
        if let Some(w) = log.as_mut() {
            writeln!(w, "{}", record.to_line()).map_err(write_err)?;
        }
        if let Some(p) = psnr_holdout {
            info!("iteration {iteration}: loss {:.3e}, held-out PSNR {p:.2} dB", loss.total);
        } else {
            debug!("iteration {iteration}: loss {:.3e}", loss.total);
        }
        records.push(record);
    }
    let final_psnr = records.last().and_then(|r| r.psnr_holdout);
    Ok(TrainOutcome {
        field,
        log: records,
        final_psnr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::HexPlaneField;
    use crate::grid::Grid;
    use nalgebra::UnitQuaternion;

    fn setup() -> (CameraIntrinsics, Vec<PoseSE3>, HexPlaneField) {
        let k = CameraIntrinsics::new(10.0, 10.0, 3.5, 2.5, 8, 6).unwrap();
        let poses: Vec<PoseSE3> = (0..3)
            .map(|i| PoseSE3::new(UnitQuaternion::identity(), Vector3::new(0.1 * i as f64, 0.0, 0.0)))
            .collect();
        let bounds = scene_bounds(&k, &poses, 3.0).unwrap();
        let field = HexPlaneField::new(
            bounds,
            Resolution {
                spatial: [4; 3],
                temporal: 3,
            },
            [2, 2, 2],
            4,
            8,
            1,
        )
        .unwrap();
        (k, poses, field)
    }

    #[test]
    fn bounds_cover_cameras_and_far_plane() {
        let (k, poses, _) = setup();
        let b = scene_bounds(&k, &poses, 3.0).unwrap();
        assert_eq!(b.min[2], 0.0);
        assert!((b.max[2] - 3.0).abs() < 1e-12);
        assert!(b.min[0] < -1.0 && b.max[0] > 1.2);
        assert_eq!((b.min[3], b.max[3]), (0.0, 1.0));
    }

    #[test]
    fn zero_iterations_leave_field_unchanged() {
        let (k, poses, field) = setup();
        let views = vec![TrainingView {
            image: Grid::filled(8, 6, [0.5; 3]),
            pose: poses[0],
            time: 0.0,
        }];
        let cfg = TrainConfig {
            iterations: 0,
            ..Default::default()
        };
        let out = train(field.clone(), &views, &[], &k, &cfg, None).unwrap();
        assert_eq!(out.field, field);
        assert!(out.log.is_empty());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.upsample_schedule.reverse();
        assert!(c.validate().is_err());
        let c = TrainConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let parsed: Result<TrainConfig, _> = toml::from_str("lambda_tv = 0.01\nbogus = 1\n");
        assert!(parsed.is_err());
    }

    #[test]
    fn ray_gradient_matches_finite_differences() {
        let (k, poses, field) = setup();
        let ray = view_ray(&k, &poses[1], 5, 2, 0.4, 0.05);
        let g = [0.4, -1.0, 0.7];
        let objective = |f: &HexPlaneField| {
            let mut s = RayScratch::default();
            let o = render_ray(f, &ray, 16, None, &mut s).unwrap();
            (0..3).map(|c| g[c] * o.rgb[c]).sum::<f64>()
        };
        let mut scratch = RayScratch::default();
        let out = render_ray(&field, &ray, 16, None, &mut scratch).unwrap();
        let mut grads = FieldGradients::zeros_like(&field);
        backward_ray(&field, &out, &g, &mut scratch, &mut grads);
        let flat: Vec<f64> = grads.slices().iter().flat_map(|s| s.iter().copied()).collect();
        let nonzero: Vec<usize> = (0..flat.len()).filter(|&i| flat[i] != 0.0).collect();
        assert!(nonzero.len() > 100);
        for &i in nonzero.iter().step_by(nonzero.len() / 100) {
            let h = 1e-5;
            let (mut p, mut m) = (field.clone(), field.clone());
            nudge(&mut p, i, h);
            nudge(&mut m, i, -h);
            let fd = (objective(&p) - objective(&m)) / (2.0 * h);
            let rel = (fd - flat[i]).abs() / fd.abs().max(flat[i].abs());
            assert!(rel < 1e-3 || (fd - flat[i]).abs() < 1e-10, "#{i}: {fd} vs {}", flat[i]);
        }
    }

    fn nudge(field: &mut HexPlaneField, mut idx: usize, h: f64) {
        for (_, block) in field.parameters_mut() {
            if idx < block.len() {
                block[idx] += h;
                return;
            }
            idx -= block.len();
        }
    }

    #[test]
    fn learns_a_constant_color() {
        let (k, poses, field) = setup();
        let color = [0.8, 0.3, 0.55];
        let views: Vec<TrainingView> = poses[..2]
            .iter()
            .enumerate()
            .map(|(i, p)| TrainingView {
                image: Grid::filled(8, 6, color),
                pose: *p,
                time: i as f64,
            })
            .collect();
        let holdout = vec![TrainingView {
            image: Grid::filled(8, 6, color),
            pose: poses[2],
            time: 0.5,
        }];
        let cfg = TrainConfig {
            iterations: 300,
            batch_size: 32,
            samples_per_ray: 16,
            upsample_schedule: Vec::new(),
            lr_decoder: 0.01,
            holdout_every: 0,
            ..Default::default()
        };
        let mut log = Vec::new();
        let out = train(field, &views, &holdout, &k, &cfg, Some(&mut log)).unwrap();
        let text = String::from_utf8(log).unwrap();
        assert!(text.starts_with(LOG_HEADER));
        assert_eq!(text.lines().count(), 301);
        assert!(out.final_psnr.unwrap() > 40.0, "{:?}", out.final_psnr);
    }
}
