//! Synthetic dynamic scenes with exact ground truth.
//!
//! Scenes are sets of solid-textured boxes: static ones fixed in the world and
//! movers translating (and optionally spinning about their vertical axis) over
//! the sequence. Frames are ray cast at pixel centers, so depth, flow and the
//! motion mask are exact rather than interpolated. The world frame uses the
//! camera convention: x right, y down, z forward.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ba::{FlowEstimate, FlowProvider, Trajectory};
use crate::geometry::{project, retract, CameraIntrinsics, PoseSE3, Twist, MIN_DEPTH};
use crate::grid::{FlowField, Grid, RgbImage};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate scene: {0}")]
    DegenerateSpec(String),
    #[error("invalid scene spec: {0}")]
    Invalid(String),
}

/// Axis-aligned box with a procedural solid texture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub texture_seed: u64,
    /// Noise lattice cells per scene unit.
    pub texture_frequency: f64,
}

/// A box moving rigidly over the normalized sequence time `s ∈ [0, 1]`.
///
/// The box is given in its local frame; its center follows `start → end` plus
/// a sinusoidal `swing` of `swing_cycles` periods, and it turns by `spin`
/// radians about the y axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoverSpec {
    pub shape: BoxSpec,
    pub start: [f64; 3],
    pub end: [f64; 3],
    #[serde(default)]
    pub swing: [f64; 3],
    #[serde(default)]
    pub swing_cycles: f64,
    #[serde(default)]
    pub spin: f64,
    /// Semantic class, e.g. `person`; classless movers never appear in semantic masks.
    #[serde(default)]
    pub class: Option<String>,
}

/// Camera on a circular arc in the x–z plane around `pivot`, always facing it,
/// with a vertical sinusoidal bob.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPathSpec {
    pub pivot: [f64; 3],
    pub radius: f64,
    pub angle_start: f64,
    pub angle_end: f64,
    #[serde(default)]
    pub bob_amplitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub frames: usize,
    /// Seconds between frames.
    pub frame_interval: f64,
    pub statics: Vec<BoxSpec>,
    #[serde(default)]
    pub movers: Vec<MoverSpec>,
    pub camera: CameraPathSpec,
}

/// Classes treated as semantically dynamic.
pub const SEMANTIC_CLASSES: [&str; 3] = ["person", "cat", "dog"];

impl SceneSpec {
    /// The reference scene: a textured room with two pillars and one box
    /// moving mostly upward, seen from a camera sweeping sideways. Mirrored in
    /// `scenes/box-orbit.toml` at the repository root.
    pub fn box_orbit() -> Self {
        SceneSpec {
            name: "box-orbit".into(),
            width: 64,
            height: 48,
            fx: 56.0,
            fy: 56.0,
            cx: 31.5,
            cy: 23.5,
            frames: 20,
            frame_interval: 0.1,
            statics: vec![
                BoxSpec {
                    min: [-9.0, -7.0, 9.0],
                    max: [9.0, 7.0, 9.5],
                    texture_seed: 11,
                    texture_frequency: 0.9,
                },
                BoxSpec {
                    min: [-9.0, 1.6, -3.0],
                    max: [9.0, 2.0, 9.0],
                    texture_seed: 23,
                    texture_frequency: 1.1,
                },
                BoxSpec {
                    min: [-9.0, -2.6, -3.0],
                    max: [9.0, -2.2, 9.0],
                    texture_seed: 29,
                    texture_frequency: 1.0,
                },
                BoxSpec {
                    min: [-2.9, -2.2, 4.6],
                    max: [-2.1, 1.6, 5.4],
                    texture_seed: 37,
                    texture_frequency: 1.3,
                },
                BoxSpec {
                    min: [2.3, -2.2, 6.0],
                    max: [3.1, 1.6, 6.8],
                    texture_seed: 41,
                    texture_frequency: 1.2,
                },
            ],
            movers: vec![MoverSpec {
                shape: BoxSpec {
                    min: [-0.8, -0.8, -0.8],
                    max: [0.8, 0.8, 0.8],
                    texture_seed: 51,
                    texture_frequency: 1.4,
                },
                start: [0.45, -0.55, 4.3],
                end: [0.15, 0.65, 4.3],
                swing: [0.0, 0.0, 0.0],
                swing_cycles: 0.0,
                spin: 0.0,
                class: None,
            }],
            camera: CameraPathSpec {
                pivot: [0.0, 0.0, 16.0],
                radius: 16.0,
                angle_start: -0.1,
                angle_end: 0.1,
                bob_amplitude: 0.12,
            },
        }
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics, SynthError> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
            .map_err(|e| SynthError::Invalid(e.to_string()))
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        self.intrinsics()?;
        if self.frames < 2 || !(self.frame_interval > 0.0) {
            return Err(SynthError::Invalid("need ≥ 2 frames and positive interval".into()));
        }
        let boxes = self.statics.iter().chain(self.movers.iter().map(|m| &m.shape));
        for b in boxes {
            if (0..3).any(|i| !(b.max[i] > b.min[i])) || !(b.texture_frequency > 0.0) {
                return Err(SynthError::Invalid(format!("degenerate box {b:?}")));
            }
        }
        if !(self.camera.radius > 0.0) {
            return Err(SynthError::Invalid("camera radius must be positive".into()));
        }
        Ok(())
    }

    pub fn timestamps(&self) -> Vec<f64> {
        (0..self.frames).map(|f| f as f64 * self.frame_interval).collect()
    }

    /// Normalized time of a frame in `[0, 1]`.
    pub fn normalized_time(&self, frame: usize) -> f64 {
        frame as f64 / (self.frames - 1) as f64
    }
}

fn v3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn hash(seed: u64, x: i64, y: i64, z: i64, c: u64) -> f64 {
    let mut h = seed
        ^ (x as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (y as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
        ^ (z as u64).wrapping_mul(0x1656_67B1_9E37_79F9)
        ^ c.wrapping_mul(0x27D4_EB2F_1656_67C5);
    h ^= h >> 33;
    h = h.wrapping_mul(0xFF51_AFD7_ED55_8CCD);
    h ^= h >> 33;
    h = h.wrapping_mul(0xC4CE_B9FE_1A85_EC53);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}

fn value_noise(seed: u64, p: &Vector3<f64>, channel: u64) -> f64 {
    let base = p.map(f64::floor);
    let f = p - base;
    let (ix, iy, iz) = (base.x as i64, base.y as i64, base.z as i64);
    let (u, v, w) = (smooth(f.x), smooth(f.y), smooth(f.z));
    let mut acc = 0.0;
    for dz in 0..2 {
        for dy in 0..2 {
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - u } else { u };
                let wy = if dy == 0 { 1.0 - v } else { v };
                let wz = if dz == 0 { 1.0 - w } else { w };
                acc += wx * wy * wz * hash(seed, ix + dx, iy + dy, iz + dz, channel);
            }
        }
    }
    acc
}

/// Two-octave solid value-noise texture, channels in `[0.1, 0.9]`.
fn texture(b: &BoxSpec, seed: u64, local: &Vector3<f64>) -> [f64; 3] {
    let s = b.texture_seed ^ seed.wrapping_mul(0x5851_F42D_4C95_7F2D);
    let p = local * b.texture_frequency;
    let mut rgb = [0.0; 3];
    for (c, out) in rgb.iter_mut().enumerate() {
        let n = (2.0 * value_noise(s, &p, c as u64) + value_noise(s, &(p * 2.0), 3 + c as u64)) / 3.0;
        *out = 0.1 + 0.8 * n;
    }
    rgb
}

fn ray_box(origin: &Vector3<f64>, dir: &Vector3<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> Option<f64> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for i in 0..3 {
        if dir[i].abs() < 1e-300 {
            if origin[i] < min[i] || origin[i] > max[i] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[i];
        let (mut a, mut b) = ((min[i] - origin[i]) * inv, (max[i] - origin[i]) * inv);
        if a > b {
            std::mem::swap(&mut a, &mut b);
        }
        t0 = t0.max(a);
        t1 = t1.min(b);
    }
    (t1 >= t0 && t0 > 1e-9).then_some(t0)
}

fn inside(p: &Vector3<f64>, min: &Vector3<f64>, max: &Vector3<f64>) -> bool {
    (0..3).all(|i| p[i] > min[i] && p[i] < max[i])
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Surface {
    Static(usize),
    Mover(usize),
}

#[derive(Clone, Copy, Debug)]
struct Hit {
    t: f64,
    surface: Surface,
    world: Vector3<f64>,
    local: Vector3<f64>,
}

/// One rendered frame with its ground truth.
#[derive(Clone, Debug)]
pub struct GroundTruthFrame {
    pub index: usize,
    pub timestamp: f64,
    pub image: RgbImage,
    /// Depth along the optical axis; infinite where nothing is hit.
    pub depth: Grid<f64>,
    /// Flow to the next frame (the previous one for the last frame).
    pub flow_to_next: FlowField,
    pub motion_mask: Grid<bool>,
    pub semantic_mask: Grid<bool>,
    /// Camera-to-world pose.
    pub pose: PoseSE3,
}

/// Renderer and exact flow oracle for a [`SceneSpec`].
#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub spec: SceneSpec,
    pub seed: u64,
    intrinsics: CameraIntrinsics,
}

impl SyntheticScene {
    pub fn new(spec: SceneSpec, seed: u64) -> Result<Self, SynthError> {
        spec.validate()?;
        let intrinsics = spec.intrinsics()?;
        let scene = Self {
            spec,
            seed,
            intrinsics,
        };
        for f in 0..scene.spec.frames {
            let c = scene.camera_pose(f).translation;
            let s = scene.spec.normalized_time(f);
            for b in &scene.spec.statics {
                if inside(&c, &v3(b.min), &v3(b.max)) {
                    return Err(SynthError::DegenerateSpec(format!(
                        "camera inside static box at frame {f}"
                    )));
                }
            }
            for m in &scene.spec.movers {
                let local = scene.mover_pose(m, s).inverse().transform_point(&c);
                if inside(&local, &v3(m.shape.min), &v3(m.shape.max)) {
                    return Err(SynthError::DegenerateSpec(format!(
                        "camera inside mover at frame {f}"
                    )));
                }
            }
        }
        Ok(scene)
    }

    pub fn intrinsics(&self) -> CameraIntrinsics {
        self.intrinsics
    }

    /// Camera-to-world pose of a frame.
    pub fn camera_pose(&self, frame: usize) -> PoseSE3 {
        let s = self.spec.normalized_time(frame);
        let c = &self.spec.camera;
        let theta = c.angle_start + (c.angle_end - c.angle_start) * s;
        let pivot = v3(c.pivot);
        let position = pivot
            + c.radius * Vector3::new(theta.sin(), 0.0, -theta.cos())
            + Vector3::new(0.0, c.bob_amplitude * (2.0 * std::f64::consts::PI * s).sin(), 0.0);
        let z = Vector3::new(-theta.sin(), 0.0, theta.cos());
        let y = Vector3::y();
        let x = y.cross(&z);
        let r = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x, y, z]));
        PoseSE3::new(UnitQuaternion::from_rotation_matrix(&r), position)
    }

    /// Local-to-world pose of a mover at normalized time `s`.
    fn mover_pose(&self, m: &MoverSpec, s: f64) -> PoseSE3 {
        let center = v3(m.start)
            + (v3(m.end) - v3(m.start)) * s
            + v3(m.swing) * (2.0 * std::f64::consts::PI * m.swing_cycles * s).sin();
        PoseSE3::new(
            UnitQuaternion::from_axis_angle(&Vector3::y_axis(), m.spin * s),
            center,
        )
    }

    pub fn ground_truth_trajectory(&self) -> Trajectory {
        Trajectory::new(
            self.spec.timestamps(),
            (0..self.spec.frames).map(|f| self.camera_pose(f)).collect(),
        )
        .expect("timestamps are increasing by construction")
    }

    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>, s: f64) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        for (i, b) in self.spec.statics.iter().enumerate() {
            if let Some(t) = ray_box(origin, dir, &v3(b.min), &v3(b.max)) {
                if best.is_none_or(|h| t < h.t) {
                    let world = origin + dir * t;
                    best = Some(Hit {
                        t,
                        surface: Surface::Static(i),
                        world,
                        local: world,
                    });
                }
            }
        }
        for (i, m) in self.spec.movers.iter().enumerate() {
            let pose = self.mover_pose(m, s);
            let inv = pose.inverse();
            let lo = inv.transform_point(origin);
            let ld = inv.rotation * dir;
            if let Some(t) = ray_box(&lo, &ld, &v3(m.shape.min), &v3(m.shape.max)) {
                if best.is_none_or(|h| t < h.t) {
                    best = Some(Hit {
                        t,
                        surface: Surface::Mover(i),
                        world: origin + dir * t,
                        local: lo + ld * t,
                    });
                }
            }
        }
        best
    }

    /// Casts the ray through (sub)pixel `p` of `frame`; `t` equals the z-depth.
    fn cast_pixel(&self, frame: usize, p: &Vector2<f64>) -> Option<Hit> {
        let pose = self.camera_pose(frame);
        let dir = pose.rotation * self.intrinsics.ray(p);
        self.cast(&pose.translation, &dir, self.spec.normalized_time(frame))
    }

    fn color(&self, hit: &Hit) -> [f64; 3] {
        match hit.surface {
            Surface::Static(i) => texture(&self.spec.statics[i], self.seed, &hit.local),
            Surface::Mover(i) => texture(&self.spec.movers[i].shape, self.seed, &hit.local),
        }
    }

    /// Renders image, depth and masks of one frame.
    pub fn render(&self, frame: usize) -> (RgbImage, Grid<f64>, Grid<bool>, Grid<bool>) {
        let (w, h) = (self.spec.width, self.spec.height);
        let hits = Grid::from_fn(w, h, |x, y| self.cast_pixel(frame, &Vector2::new(x as f64, y as f64)));
        let image = hits.map(|h| h.map_or([0.0; 3], |h| self.color(&h)));
        let depth = hits.map(|h| h.map_or(f64::INFINITY, |h| h.t));
        let motion = hits.map(|h| matches!(h.map(|h| h.surface), Some(Surface::Mover(_))));
        let semantic = hits.map(|h| match h.map(|h| h.surface) {
            Some(Surface::Mover(i)) => self.spec.movers[i]
                .class
                .as_deref()
                .is_some_and(|c| SEMANTIC_CLASSES.contains(&c)),
            _ => false,
        });
        (image, depth, motion, semantic)
    }

    /// Exact flow from `from` to `to`; confidence is 1 where the surface point
    /// is visible in the target frame and 0 elsewhere.
    pub fn exact_flow(&self, from: usize, to: usize) -> FlowEstimate {
        let (w, h) = (self.spec.width, self.spec.height);
        let s_to = self.spec.normalized_time(to);
        let s_from = self.spec.normalized_time(from);
        let target_inv = self.camera_pose(to).inverse();
        let mut vectors = Grid::filled(w, h, Vector2::zeros());
        let mut confidence = Grid::filled(w, h, 0.0);
        for y in 0..h {
            for x in 0..w {
                let p = Vector2::new(x as f64, y as f64);
                let Some(hit) = self.cast_pixel(from, &p) else { continue };
                let world_to = match hit.surface {
                    Surface::Static(_) => hit.world,
                    Surface::Mover(i) => {
                        let m = &self.spec.movers[i];
                        debug_assert!(
                            (self.mover_pose(m, s_from).transform_point(&hit.local) - hit.world).norm()
                                < 1e-9
                        );
                        self.mover_pose(m, s_to).transform_point(&hit.local)
                    }
                };
                let cam = target_inv.transform_point(&world_to);
                if cam.z <= MIN_DEPTH {
                    continue;
                }
                let Ok(q) = project(&self.intrinsics, &cam) else { continue };
                vectors.set(x, y, q - p);
                let in_bounds = q.x >= -0.5
                    && q.y >= -0.5
                    && q.x < w as f64 - 0.5
                    && q.y < h as f64 - 0.5;
                if !in_bounds {
                    continue;
                }
                let visible = self
                    .cast_pixel(to, &q)
                    .is_some_and(|h2| h2.surface == hit.surface && (h2.t - cam.z).abs() <= 1e-6 * cam.z.max(1.0));
                if visible {
                    confidence.set(x, y, 1.0);
                }
            }
        }
        FlowEstimate { vectors, confidence }
    }

    /// Renders every frame with its ground truth.
    pub fn generate(&self) -> Vec<GroundTruthFrame> {
        let n = self.spec.frames;
        (0..n)
            .map(|f| {
                let (image, depth, motion_mask, semantic_mask) = self.render(f);
                let next = if f + 1 < n { f + 1 } else { f - 1 };
                GroundTruthFrame {
                    index: f,
                    timestamp: f as f64 * self.spec.frame_interval,
                    image,
                    depth,
                    flow_to_next: self.exact_flow(f, next).to_flow_field(),
                    motion_mask,
                    semantic_mask,
                    pose: self.camera_pose(f),
                }
            })
            .collect()
    }
}

/// Renders every frame of `spec`.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<Vec<GroundTruthFrame>, SynthError> {
    Ok(SyntheticScene::new(spec.clone(), seed)?.generate())
}

impl FlowProvider for SyntheticScene {
    fn frame_count(&self) -> usize {
        self.spec.frames
    }

    fn flow(&self, from: usize, to: usize) -> Result<FlowEstimate, String> {
        if from >= self.spec.frames || to >= self.spec.frames {
            return Err(format!("frame pair ({from}, {to}) out of range"));
        }
        Ok(self.exact_flow(from, to))
    }
}

/// Wraps a provider and corrupts every flow with seeded noise; the noise of a
/// pair depends only on the seed and the pair.
pub struct NoisyFlow<P> {
    pub inner: P,
    pub noise_sigma: f64,
    pub outlier_fraction: f64,
    pub seed: u64,
}

impl<P: FlowProvider> FlowProvider for NoisyFlow<P> {
    fn frame_count(&self) -> usize {
        self.inner.frame_count()
    }

    fn flow(&self, from: usize, to: usize) -> Result<FlowEstimate, String> {
        let est = self.inner.flow(from, to)?;
        let pair_seed = self
            .seed
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add((from as u64) << 32 | to as u64);
        let field = FlowField {
            vectors: est.vectors,
            valid: est.confidence.map(|&c| c > 0.0),
        };
        let noisy = corrupt_flow(&field, self.noise_sigma, self.outlier_fraction, pair_seed);
        Ok(FlowEstimate {
            vectors: noisy.vectors,
            confidence: est.confidence,
        })
    }
}

/// Half-width (pixels) of the uniform distribution outliers are drawn from.
pub const OUTLIER_RANGE: f64 = 20.0;

/// Adds Gaussian noise everywhere and replaces a seeded subset of pixels with uniform outliers.
pub fn corrupt_flow(flow: &FlowField, noise_sigma: f64, outlier_fraction: f64, seed: u64) -> FlowField {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise_sigma.max(0.0)).expect("finite sigma");
    let fraction = outlier_fraction.clamp(0.0, 1.0);
    let mut out = flow.clone();
    for v in out.vectors.as_mut_slice() {
        let n = Vector2::new(normal.sample(&mut rng), normal.sample(&mut rng));
        let is_outlier = rng.random::<f64>() < fraction;
        let outlier = Vector2::new(
            rng.random_range(-OUTLIER_RANGE..OUTLIER_RANGE),
            rng.random_range(-OUTLIER_RANGE..OUTLIER_RANGE),
        );
        *v = if is_outlier { outlier } else { *v + n };
    }
    out
}

/// Applies independent Gaussian twist noise to every pose through the retraction.
pub fn perturb_trajectory(traj: &Trajectory, sigma_t: f64, sigma_r: f64, seed: u64) -> Trajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nt = Normal::new(0.0, sigma_t.max(0.0)).expect("finite sigma");
    let nr = Normal::new(0.0, sigma_r.max(0.0)).expect("finite sigma");
    traj.map_poses(|p| {
        let xi = Twist::new(
            Vector3::new(nt.sample(&mut rng), nt.sample(&mut rng), nt.sample(&mut rng)),
            Vector3::new(nr.sample(&mut rng), nr.sample(&mut rng), nr.sample(&mut rng)),
        );
        retract(p, &xi).expect("finite twist")
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::InverseDepthMap;
    use crate::mask::ego_flow;

    fn small_spec() -> SceneSpec {
        let mut s = SceneSpec::box_orbit();
        s.frames = 4;
        s
    }

    #[test]
    fn static_camera_static_scene_has_zero_flow() {
        let mut spec = small_spec();
        spec.movers.clear();
        spec.camera.angle_start = 0.0;
        spec.camera.angle_end = 0.0;
        spec.camera.bob_amplitude = 0.0;
        let frames = generate(&spec, 0).unwrap();
        for f in &frames {
            assert!(f.motion_mask.iter().all(|&m| !m));
            assert!(f.flow_to_next.vectors.iter().all(|v| v.norm() < 1e-9));
        }
    }

    #[test]
    fn static_flow_matches_ego_flow() {
        let scene = SyntheticScene::new(small_spec(), 3).unwrap();
        let k = scene.intrinsics();
        let (_, depth, motion, _) = scene.render(1);
        let rel = scene.camera_pose(2).inverse().compose(&scene.camera_pose(1));
        let ego = ego_flow(&rel, &InverseDepthMap::from_depth(&depth), &k).unwrap();
        let flow = scene.exact_flow(1, 2);
        let mut checked = 0;
        for i in 0..depth.len() {
            if motion.as_slice()[i] || !ego.valid.as_slice()[i] {
                continue;
            }
            let d = (flow.vectors.as_slice()[i] - ego.vectors.as_slice()[i]).norm();
            assert!(d < 1e-6, "pixel {i}: {d}");
            checked += 1;
        }
        assert!(checked > 2000);
    }

    #[test]
    fn masks_are_front_most_mover() {
        let scene = SyntheticScene::new(small_spec(), 0).unwrap();
        let (_, depth, motion, semantic) = scene.render(0);
        let cov = crate::grid::coverage(&motion);
        assert!(cov > 0.1 && cov < 0.3, "coverage {cov}");
        assert!(semantic.iter().all(|&m| !m));
        assert!(depth.iter().all(|d| d.is_finite()));
    }

    #[test]
    fn determinism_and_seed_dependence() {
        let a = generate(&small_spec(), 5).unwrap();
        let b = generate(&small_spec(), 5).unwrap();
        let c = generate(&small_spec(), 6).unwrap();
        assert_eq!(a[0].image, b[0].image);
        assert_eq!(a[0].flow_to_next, b[0].flow_to_next);
        assert_ne!(a[0].image, c[0].image);
    }

    #[test]
    fn camera_inside_geometry_is_rejected() {
        let mut spec = small_spec();
        spec.statics.push(BoxSpec {
            min: [-50.0, -50.0, -50.0],
            max: [50.0, 50.0, 50.0],
            texture_seed: 0,
            texture_frequency: 1.0,
        });
        assert!(matches!(SyntheticScene::new(spec, 0), Err(SynthError::DegenerateSpec(_))));
    }

    #[test]
    fn zero_noise_corruption_is_identity() {
        let f = FlowField::zeros(8, 6);
        assert_eq!(corrupt_flow(&f, 0.0, 0.0, 1), f);
        let all = corrupt_flow(&f, 0.0, 1.0, 1);
        assert!(all.vectors.iter().all(|v| v.norm() > 0.0));
    }

    #[test]
    fn zero_sigma_perturbation_is_identity() {
        let t = SyntheticScene::new(small_spec(), 0).unwrap().ground_truth_trajectory();
        let p = perturb_trajectory(&t, 0.0, 0.0, 9);
        assert_eq!(p, t);
        assert_eq!(perturb_trajectory(&t, 0.1, 0.01, 9), perturb_trajectory(&t, 0.1, 0.01, 9));
    }

    #[test]
    fn committed_scene_file_matches_builtin() {
        let text = include_str!("../../../scenes/box-orbit.toml");
        let spec: SceneSpec = toml::from_str(text).unwrap();
        assert_eq!(spec, SceneSpec::box_orbit());
    }

    #[test]
    fn reference_mover_covers_about_a_fifth_of_every_frame() {
        let scene = SyntheticScene::new(SceneSpec::box_orbit(), 7).unwrap();
        for f in 0..scene.spec.frames {
            let (_, _, motion, _) = scene.render(f);
            let cov = crate::grid::coverage(&motion);
            assert!((0.15..=0.25).contains(&cov), "frame {f}: coverage {cov}");
        }
    }
}
