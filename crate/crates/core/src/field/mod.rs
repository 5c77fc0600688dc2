//! Factorized space-time feature volume.
//!
//! The 4D volume is never materialized. A feature at `(x, y, z, t)` is
//!
//! ```text
//! f = Σ_r XY_r(x,y) ⊙ ZT_r(z,t) ⊙ v¹_r + Σ_r XZ_r(x,z) ⊙ YT_r(y,t) ⊙ v²_r + Σ_r YZ_r(y,z) ⊙ XT_r(x,t) ⊙ v³_r
//! ```
//!
//! where every plane holds `R_i · F` channels per node (channel `r·F + f`), the
//! planes are sampled bilinearly and each `v_r` is an `F`-vector. Time is always
//! the second axis of a spatio-temporal plane.

mod decoder;

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use decoder::{
    encode_direction, sigmoid, softplus, DecodeCache, Decoder, Dense, DIRECTION_ENCODING_WIDTH,
    DIRECTION_FREQUENCIES,
};

/// Axes (first, second) of each plane, ordered XY, ZT, XZ, YT, YZ, XT with
/// x = 0, y = 1, z = 2, t = 3. Planes `2i` and `2i + 1` form pair `i`.
pub const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (2, 3), (0, 2), (1, 3), (1, 2), (0, 3)];
pub const PLANE_NAMES: [&str; 6] = ["XY", "ZT", "XZ", "YT", "YZ", "XT"];

const CHECKPOINT_MAGIC: &[u8; 4] = b"HXPF";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum FieldError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box in `(x, y, z, t)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: [f64; 4],
    pub max: [f64; 4],
}

impl Bounds {
    pub fn validate(&self) -> Result<(), FieldError> {
        if (0..4).all(|a| self.min[a].is_finite() && self.max[a].is_finite() && self.max[a] > self.min[a]) {
            Ok(())
        } else {
            Err(FieldError::InvalidArgument(format!("degenerate bounds {self:?}")))
        }
    }

    /// Maps world coordinates to `[0, 1]⁴` without clamping.
    pub fn normalize(&self, p: [f64; 4]) -> [f64; 4] {
        std::array::from_fn(|a| (p[a] - self.min[a]) / (self.max[a] - self.min[a]))
    }
}

/// Node counts per spatial axis and along time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resolution {
    pub spatial: [usize; 3],
    pub temporal: usize,
}

impl Resolution {
    pub fn axis(&self, a: usize) -> usize {
        if a < 3 {
            self.spatial[a]
        } else {
            self.temporal
        }
    }

    fn validate(&self) -> Result<(), FieldError> {
        if (0..4).all(|a| self.axis(a) >= 2) {
            Ok(())
        } else {
            Err(FieldError::InvalidArgument(format!("resolution {self:?} below 2 nodes per axis")))
        }
    }
}

/// One 2D grid with `channels` values per node, stored `[(b · a_len + a) · channels + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePlane {
    pub a_len: usize,
    pub b_len: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeaturePlane {
    pub fn zeros(a_len: usize, b_len: usize, channels: usize) -> Self {
        Self {
            a_len,
            b_len,
            channels,
            data: vec![0.0; a_len * b_len * channels],
        }
    }

    #[inline]
    pub fn offset(&self, a: usize, b: usize) -> usize {
        (b * self.a_len + a) * self.channels
    }

    #[inline]
    pub fn value(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[self.offset(a, b) + c]
    }

    /// Bilinear sample at normalized coordinates in `[0, 1]²`.
    pub fn locate(&self, u: f64, v: f64) -> PlaneSample {
        let (a0, fa) = cell(u, self.a_len);
        let (b0, fb) = cell(v, self.b_len);
        PlaneSample {
            offsets: [
                self.offset(a0, b0),
                self.offset(a0 + 1, b0),
                self.offset(a0, b0 + 1),
                self.offset(a0 + 1, b0 + 1),
            ],
            weights: [
                (1.0 - fa) * (1.0 - fb),
                fa * (1.0 - fb),
                (1.0 - fa) * fb,
                fa * fb,
            ],
        }
    }

    pub fn sample_into(&self, s: &PlaneSample, out: &mut [f64]) {
        let c = self.channels;
        let [o0, o1, o2, o3] = s.offsets;
        let [w0, w1, w2, w3] = s.weights;
        let (d0, d1, d2, d3) = (
            &self.data[o0..o0 + c],
            &self.data[o1..o1 + c],
            &self.data[o2..o2 + c],
            &self.data[o3..o3 + c],
        );
        for k in 0..c {
            out[k] = w0 * d0[k] + w1 * d1[k] + w2 * d2[k] + w3 * d3[k];
        }
    }

    /// Adds `grad` at the sample position into a gradient grid of this shape.
    pub fn scatter(s: &PlaneSample, grad: &[f64], into: &mut [f64]) {
        let c = grad.len();
        for (&o, &w) in s.offsets.iter().zip(&s.weights) {
            if w == 0.0 {
                continue;
            }
            for (t, g) in into[o..o + c].iter_mut().zip(grad) {
                *t += w * g;
            }
        }
    }

    /// Bilinear resampling onto a finer grid.
    pub fn resampled(&self, a_len: usize, b_len: usize) -> FeaturePlane {
        let mut out = FeaturePlane::zeros(a_len, b_len, self.channels);
        for b in 0..b_len {
            for a in 0..a_len {
                let s = self.locate(a as f64 / (a_len - 1) as f64, b as f64 / (b_len - 1) as f64);
                let o = out.offset(a, b);
                self.sample_into(&s, &mut out.data[o..o + self.channels]);
            }
        }
        out
    }
}

#[inline]
fn cell(u: f64, n: usize) -> (usize, f64) {
    let pos = u * (n - 1) as f64;
    let i = (pos.floor().max(0.0) as usize).min(n - 2);
    (i, pos - i as f64)
}

/// Bilinear footprint of a point on one plane.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PlaneSample {
    pub offsets: [usize; 4],
    pub weights: [f64; 4],
}

/// Bilinear footprints of a point on all six planes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PointLocation {
    pub samples: [PlaneSample; 6],
    /// Set when the query had to be clamped into the unit hypercube.
    pub clamped: bool,
}

/// Feature vector at a point plus whether it was clamped.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureQuery {
    pub feature: Vec<f64>,
    pub clamped: bool,
}

/// Parameter block kinds, for per-kind learning rates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Grid,
    Decoder,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HexPlaneField {
    pub bounds: Bounds,
    pub resolution: Resolution,
    /// Rank of each plane pair.
    pub ranks: [usize; 3],
    pub feature_dim: usize,
    pub planes: Vec<FeaturePlane>,
    /// `v_r^i` for pair `i`, stored `[r · F + f]`.
    pub vectors: Vec<Vec<f64>>,
    pub decoder: Decoder,
}

/// Gradients mirroring every parameter of a [`HexPlaneField`].
#[derive(Clone, Debug, PartialEq)]
pub struct FieldGradients {
    pub planes: Vec<Vec<f64>>,
    pub vectors: Vec<Vec<f64>>,
    pub decoder: Decoder,
}

impl FieldGradients {
    pub fn zeros_like(field: &HexPlaneField) -> Self {
        Self {
            planes: field.planes.iter().map(|p| vec![0.0; p.data.len()]).collect(),
            vectors: field.vectors.iter().map(|v| vec![0.0; v.len()]).collect(),
            decoder: Decoder::zeros(field.feature_dim, field.decoder.hidden_width()),
        }
    }

    pub fn clear(&mut self) {
        for s in self.slices_mut() {
            s.fill(0.0);
        }
    }

    /// Gradient blocks in the order of [`HexPlaneField::parameters_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        out.extend(self.planes.iter().map(|p| p.as_slice()));
        out.extend(self.vectors.iter().map(|v| v.as_slice()));
        for l in self.decoder.layers() {
            out.push(&l.weights);
            out.push(&l.bias);
        }
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.extend(self.planes.iter_mut().map(|p| p.as_mut_slice()));
        out.extend(self.vectors.iter_mut().map(|v| v.as_mut_slice()));
        for l in self.decoder.layers_mut() {
            out.push(&mut l.weights);
            out.push(&mut l.bias);
        }
        out
    }

    pub fn add(&mut self, other: &FieldGradients) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&x| x == 0.0))
    }
}

/// Scratch buffers for one point's forward and backward pass.
#[derive(Clone, Debug, Default)]
pub struct PointTrace {
    pub location: PointLocation,
    /// Sampled plane values, planes concatenated.
    pub sampled: Vec<f64>,
    pub feature: Vec<f64>,
    pub decode: DecodeCache,
    pub density: f64,
    pub rgb: [f64; 3],
}

impl HexPlaneField {
    /// Planes uniform in `[−0.1, 0.1]`, vectors at one, random decoder; deterministic per seed.
    pub fn new(
        bounds: Bounds,
        resolution: Resolution,
        ranks: [usize; 3],
        feature_dim: usize,
        hidden_width: usize,
        seed: u64,
    ) -> Result<Self, FieldError> {
        bounds.validate()?;
        resolution.validate()?;
        if feature_dim == 0 || hidden_width == 0 || ranks.contains(&0) {
            return Err(FieldError::InvalidArgument(
                "ranks, feature dimension and hidden width must be positive".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let planes = PLANE_AXES
            .iter()
            .enumerate()
            .map(|(p, &(a, b))| {
                let mut plane =
                    FeaturePlane::zeros(resolution.axis(a), resolution.axis(b), ranks[p / 2] * feature_dim);
                for x in &mut plane.data {
                    *x = rng.random_range(-0.1..=0.1);
                }
                plane
            })
            .collect();
        let vectors = ranks.iter().map(|&r| vec![1.0; r * feature_dim]).collect();
        let decoder = Decoder::random(feature_dim, hidden_width, &mut rng);
        Ok(Self {
            bounds,
            resolution,
            ranks,
            feature_dim,
            planes,
            vectors,
            decoder,
        })
    }

    /// Number of plane values, `Σ A·B·R_i·F`.
    pub fn grid_parameter_count(&self) -> usize {
        self.planes.iter().map(|p| p.data.len()).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.grid_parameter_count()
            + self.vectors.iter().map(Vec::len).sum::<usize>()
            + self.decoder.parameter_count()
    }

    /// Parameter blocks: planes, vectors, then decoder weights and biases.
    pub fn parameters_mut(&mut self) -> Vec<(ParamKind, &mut [f64])> {
        let mut out: Vec<(ParamKind, &mut [f64])> = Vec::new();
        out.extend(self.planes.iter_mut().map(|p| (ParamKind::Grid, p.data.as_mut_slice())));
        out.extend(self.vectors.iter_mut().map(|v| (ParamKind::Grid, v.as_mut_slice())));
        for l in self.decoder.layers_mut() {
            out.push((ParamKind::Decoder, l.weights.as_mut_slice()));
            out.push((ParamKind::Decoder, l.bias.as_mut_slice()));
        }
        out
    }

    /// Length of [`PointTrace::sampled`].
    pub fn sampled_len(&self) -> usize {
        self.planes.iter().map(|p| p.channels).sum()
    }

    /// Bilinear footprints of a normalized point, clamped into `[0, 1]⁴`.
    pub fn locate(&self, coords: [f64; 4]) -> Result<PointLocation, FieldError> {
        if coords.iter().any(|c| !c.is_finite()) {
            return Err(FieldError::InvalidArgument(format!("non-finite query {coords:?}")));
        }
        let clamped = coords.iter().any(|&c| !(0.0..=1.0).contains(&c));
        let u = coords.map(|c| c.clamp(0.0, 1.0));
        let mut samples = [PlaneSample::default(); 6];
        for (p, &(a, b)) in PLANE_AXES.iter().enumerate() {
            samples[p] = self.planes[p].locate(u[a], u[b]);
        }
        Ok(PointLocation { samples, clamped })
    }

    /// Evaluates the feature at a located point, recording sampled plane values.
    pub fn feature_at(&self, location: &PointLocation, sampled: &mut Vec<f64>, feature: &mut Vec<f64>) {
        let f_dim = self.feature_dim;
        sampled.resize(self.sampled_len(), 0.0);
        feature.clear();
        feature.resize(f_dim, 0.0);
        let mut start = 0;
        for (p, plane) in self.planes.iter().enumerate() {
            plane.sample_into(&location.samples[p], &mut sampled[start..start + plane.channels]);
            start += plane.channels;
        }
        let mut start = 0;
        for pair in 0..3 {
            let c = self.planes[2 * pair].channels;
            let (s, t) = (&sampled[start..start + c], &sampled[start + c..start + 2 * c]);
            let v = &self.vectors[pair];
            for k in 0..c {
                feature[k % f_dim] += s[k] * t[k] * v[k];
            }
            start += 2 * c;
        }
    }

    /// Feature at normalized coordinates.
    pub fn query_feature(&self, coords: [f64; 4]) -> Result<FeatureQuery, FieldError> {
        let location = self.locate(coords)?;
        let (mut sampled, mut feature) = (Vec::new(), Vec::new());
        self.feature_at(&location, &mut sampled, &mut feature);
        Ok(FeatureQuery {
            feature,
            clamped: location.clamped,
        })
    }

    /// Full forward pass for one point into `trace`.
    pub fn evaluate(&self, coords: [f64; 4], dir: &[f64; 3], trace: &mut PointTrace) -> Result<(), FieldError> {
        trace.location = self.locate(coords)?;
        self.feature_at(&trace.location, &mut trace.sampled, &mut trace.feature);
        let (density, rgb) = self.decoder.decode_cached(&trace.feature, dir, &mut trace.decode);
        trace.density = density;
        trace.rgb = rgb;
        Ok(())
    }

    /// Reverse pass of [`HexPlaneField::feature_at`]: accumulates plane and vector gradients.
    pub fn feature_backward(
        &self,
        location: &PointLocation,
        sampled: &[f64],
        dfeature: &[f64],
        grads: &mut FieldGradients,
        scratch: &mut Vec<f64>,
    ) {
        let f_dim = self.feature_dim;
        let mut start = 0;
        for pair in 0..3 {
            let c = self.planes[2 * pair].channels;
            let (s, t) = (&sampled[start..start + c], &sampled[start + c..start + 2 * c]);
            let v = &self.vectors[pair];
            let gv = &mut grads.vectors[pair];
            scratch.resize(2 * c, 0.0);
            for k in 0..c {
                let g = dfeature[k % f_dim];
                gv[k] += g * s[k] * t[k];
                scratch[k] = g * t[k] * v[k];
                scratch[c + k] = g * s[k] * v[k];
            }
            FeaturePlane::scatter(&location.samples[2 * pair], &scratch[..c], &mut grads.planes[2 * pair]);
            FeaturePlane::scatter(
                &location.samples[2 * pair + 1],
                &scratch[c..2 * c],
                &mut grads.planes[2 * pair + 1],
            );
            start += 2 * c;
        }
    }

    /// Accumulates gradients of `dσ·σ + drgb·rgb` for an evaluated point.
    pub fn backward(
        &self,
        trace: &PointTrace,
        d_density: f64,
        d_rgb: &[f64; 3],
        grads: &mut FieldGradients,
        scratch: &mut Vec<f64>,
    ) {
        let mut dfeature = vec![0.0; self.feature_dim];
        self.decoder.backward(
            &trace.feature,
            &trace.decode,
            d_density,
            d_rgb,
            &mut grads.decoder,
            &mut dfeature,
        );
        self.feature_backward(&trace.location, &trace.sampled, &dfeature, grads, scratch);
    }

    /// Gradients of `dσ·σ + drgb·rgb` at one point.
    pub fn query_backward(
        &self,
        coords: [f64; 4],
        dir: &[f64; 3],
        d_density: f64,
        d_rgb: &[f64; 3],
    ) -> Result<FieldGradients, FieldError> {
        let mut trace = PointTrace::default();
        self.evaluate(coords, dir, &mut trace)?;
        let mut grads = FieldGradients::zeros_like(self);
        self.backward(&trace, d_density, d_rgb, &mut grads, &mut Vec::new());
        Ok(grads)
    }

    /// Bilinearly resamples every plane onto a resolution at least as fine.
    pub fn upsample(&self, resolution: Resolution) -> Result<HexPlaneField, FieldError> {
        resolution.validate()?;
        if (0..4).any(|a| resolution.axis(a) < self.resolution.axis(a)) {
            return Err(FieldError::InvalidArgument(format!(
                "cannot upsample {:?} to coarser {:?}",
                self.resolution, resolution
            )));
        }
        if resolution == self.resolution {
            return Ok(self.clone());
        }
        let planes = PLANE_AXES
            .iter()
            .zip(&self.planes)
            .map(|(&(a, b), p)| p.resampled(resolution.axis(a), resolution.axis(b)))
            .collect();
        Ok(HexPlaneField {
            resolution,
            planes,
            ..self.clone()
        })
    }

    /// Writes the versioned little-endian checkpoint.
    pub fn save(&self, w: &mut impl Write) -> Result<(), FieldError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        let header_u32 = [
            CHECKPOINT_VERSION,
            self.resolution.spatial[0] as u32,
            self.resolution.spatial[1] as u32,
            self.resolution.spatial[2] as u32,
            self.resolution.temporal as u32,
            self.ranks[0] as u32,
            self.ranks[1] as u32,
            self.ranks[2] as u32,
            self.feature_dim as u32,
            self.decoder.hidden_width() as u32,
        ];
        w.write_all(&header_u32[0].to_le_bytes())?;
        for x in self.bounds.min.iter().chain(&self.bounds.max) {
            w.write_all(&x.to_le_bytes())?;
        }
        for v in &header_u32[1..] {
            w.write_all(&v.to_le_bytes())?;
        }
        let mut copy = self.clone();
        for (_, block) in copy.parameters_mut() {
            for x in block.iter() {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint written by [`HexPlaneField::save`].
    pub fn load(r: &mut impl Read) -> Result<HexPlaneField, FieldError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(FieldError::Checkpoint(format!("bad magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(FieldError::Checkpoint(format!("unsupported version {version}")));
        }
        let mut bounds = Bounds {
            min: [0.0; 4],
            max: [0.0; 4],
        };
        for x in bounds.min.iter_mut().chain(bounds.max.iter_mut()) {
            *x = read_f64(r)?;
        }
        let mut h = [0usize; 9];
        for v in &mut h {
            *v = read_u32(r)? as usize;
        }
        let resolution = Resolution {
            spatial: [h[0], h[1], h[2]],
            temporal: h[3],
        };
        let size_ok = h.iter().all(|&x| x > 0 && x <= 1 << 16);
        if !size_ok {
            return Err(FieldError::Checkpoint(format!("implausible header {h:?}")));
        }
        let mut field = HexPlaneField::new(bounds, resolution, [h[4], h[5], h[6]], h[7], h[8], 0)
            .map_err(|e| FieldError::Checkpoint(e.to_string()))?;
        for (_, block) in field.parameters_mut() {
            for x in block.iter_mut() {
                *x = read_f64(r)?;
            }
        }
        Ok(field)
    }
}

fn truncated(e: std::io::Error) -> FieldError {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        FieldError::Checkpoint("truncated payload".into())
    } else {
        FieldError::Io(e)
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32, FieldError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> Result<f64, FieldError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(f64::from_le_bytes(b))
}

/// Field shape and size settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldConfig {
    /// Nodes per spatial axis at the start of training.
    pub spatial_resolution: usize,
    /// Nodes along time at the start of training.
    pub temporal_resolution: usize,
    pub ranks: [usize; 3],
    pub feature_dim: usize,
    pub hidden_width: usize,
    /// Scene box `[x, y, z, t]`; derived from the cameras when absent.
    pub bounds: Option<Bounds>,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            spatial_resolution: 32,
            temporal_resolution: 16,
            ranks: [4, 4, 4],
            feature_dim: 16,
            hidden_width: 64,
            bounds: None,
        }
    }
}

impl FieldConfig {
    pub fn resolution(&self) -> Resolution {
        Resolution {
            spatial: [self.spatial_resolution; 3],
            temporal: self.temporal_resolution,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_bounds() -> Bounds {
        Bounds {
            min: [0.0; 4],
            max: [1.0; 4],
        }
    }

    fn small(seed: u64) -> HexPlaneField {
        HexPlaneField::new(
            unit_bounds(),
            Resolution {
                spatial: [4, 5, 3],
                temporal: 3,
            },
            [2, 1, 3],
            4,
            6,
            seed,
        )
        .unwrap()
    }

    /// Independent evaluation of the factorized sum with explicit loops.
    fn naive_feature(field: &HexPlaneField, u: [f64; 4]) -> Vec<f64> {
        let bilinear = |p: &FeaturePlane, x: f64, y: f64, c: usize| {
            let fx = x * (p.a_len - 1) as f64;
            let fy = y * (p.b_len - 1) as f64;
            let mut total = 0.0;
            for a in 0..p.a_len {
                for b in 0..p.b_len {
                    let wa = (1.0 - (fx - a as f64).abs()).max(0.0);
                    let wb = (1.0 - (fy - b as f64).abs()).max(0.0);
                    total += wa * wb * p.value(a, b, c);
                }
            }
            total
        };
        let f = field.feature_dim;
        let mut out = vec![0.0; f];
        for pair in 0..3 {
            for r in 0..field.ranks[pair] {
                for (k, o) in out.iter_mut().enumerate() {
                    let c = r * f + k;
                    let (pa, pb) = (PLANE_AXES[2 * pair], PLANE_AXES[2 * pair + 1]);
                    let s = bilinear(&field.planes[2 * pair], u[pa.0], u[pa.1], c);
                    let t = bilinear(&field.planes[2 * pair + 1], u[pb.0], u[pb.1], c);
                    *o += s * t * field.vectors[pair][c];
                }
            }
        }
        out
    }

    #[test]
    fn same_seed_same_field() {
        assert_eq!(small(5), small(5));
        assert_ne!(small(5), small(6));
        assert!(small(5).planes.iter().all(|p| p.data.iter().all(|x| x.abs() <= 0.1)));
    }

    #[test]
    fn minimal_shapes_and_footprint() {
        let res = Resolution {
            spatial: [3, 4, 5],
            temporal: 6,
        };
        let f = HexPlaneField::new(unit_bounds(), res, [1, 1, 1], 1, 2, 0).unwrap();
        assert_eq!(f.planes.len(), 6);
        assert_eq!(f.vectors.iter().map(Vec::len).collect::<Vec<_>>(), vec![1, 1, 1]);
        let expected: usize = PLANE_AXES.iter().map(|&(a, b)| res.axis(a) * res.axis(b)).sum();
        assert_eq!(f.grid_parameter_count(), expected);
        let g = small(1);
        let expected: usize = PLANE_AXES
            .iter()
            .enumerate()
            .map(|(p, &(a, b))| g.resolution.axis(a) * g.resolution.axis(b) * g.ranks[p / 2] * 4)
            .sum();
        assert_eq!(g.grid_parameter_count(), expected);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        let mut b = unit_bounds();
        b.max[2] = 0.0;
        let res = Resolution {
            spatial: [2; 3],
            temporal: 2,
        };
        assert!(HexPlaneField::new(b, res, [1; 3], 2, 2, 0).is_err());
        let res1 = Resolution {
            spatial: [2, 1, 2],
            temporal: 2,
        };
        assert!(HexPlaneField::new(unit_bounds(), res1, [1; 3], 2, 2, 0).is_err());
        assert!(small(0).query_feature([f64::NAN, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn constant_planes_give_sum_of_products() {
        let mut f = small(0);
        let consts = [(0.5, 2.0), (-1.0, 0.25), (3.0, 0.1)];
        for (p, plane) in f.planes.iter_mut().enumerate() {
            let c = if p % 2 == 0 { consts[p / 2].0 } else { consts[p / 2].1 };
            plane.data.fill(c);
        }
        f.ranks = [1, 1, 1];
        for (p, plane) in f.planes.iter_mut().enumerate() {
            *plane = FeaturePlane {
                data: vec![plane.data[0]; plane.a_len * plane.b_len * 4],
                channels: 4,
                ..plane.clone()
            };
            let _ = p;
        }
        f.vectors = vec![vec![1.0; 4]; 3];
        let q = f.query_feature([0.3, 0.7, 0.1, 0.9]).unwrap();
        let expected: f64 = consts.iter().map(|(a, b)| a * b).sum();
        assert!(q.feature.iter().all(|&x| (x - expected).abs() < 1e-12));
        assert!(!q.clamped);
    }

    #[test]
    fn matches_naive_evaluation_and_grid_nodes() {
        let f = small(9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..50 {
            let u: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..=1.0));
            let q = f.query_feature(u).unwrap();
            let n = naive_feature(&f, u);
            for (a, b) in q.feature.iter().zip(&n) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // Exactly on a node: one bilinear weight is one.
        let loc = f.locate([1.0 / 3.0, 0.25, 0.5, 1.0]).unwrap();
        for s in &loc.samples {
            let ones = s.weights.iter().filter(|&&w| (w - 1.0).abs() < 1e-12).count();
            assert_eq!(ones, 1, "{s:?}");
        }
    }

    #[test]
    fn out_of_bounds_queries_clamp() {
        let f = small(4);
        let q = f.query_feature([1.5, -0.2, 0.5, 0.5]).unwrap();
        assert!(q.clamped);
        assert_eq!(q.feature, f.query_feature([1.0, 0.0, 0.5, 0.5]).unwrap().feature);
    }

    #[test]
    fn continuous_across_cells() {
        let f = small(8);
        let edge = 1.0 / 3.0;
        let a = f.query_feature([edge - 1e-9, 0.4, 0.4, 0.4]).unwrap().feature;
        let b = f.query_feature([edge + 1e-9, 0.4, 0.4, 0.4]).unwrap().feature;
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-6));
    }

    #[test]
    fn zero_rank_is_additive_identity() {
        let f1 = small(3);
        let mut f2 = f1.clone();
        f2.ranks[0] = 3;
        let old = &f1.planes;
        for p in [0usize, 1] {
            let mut plane = FeaturePlane::zeros(old[p].a_len, old[p].b_len, 3 * 4);
            for b in 0..plane.b_len {
                for a in 0..plane.a_len {
                    for c in 0..old[p].channels {
                        let o = plane.offset(a, b);
                        plane.data[o + c] = old[p].value(a, b, c);
                    }
                }
            }
            f2.planes[p] = plane;
        }
        f2.vectors[0] = [f1.vectors[0].clone(), vec![1.0; 4]].concat();
        for u in [[0.1, 0.2, 0.3, 0.4], [0.9, 0.5, 0.0, 1.0]] {
            assert_eq!(f1.query_feature(u).unwrap(), f2.query_feature(u).unwrap());
        }
    }

    #[test]
    fn upsampling_rules() {
        let f = small(2);
        assert_eq!(f.upsample(f.resolution).unwrap(), f);
        let coarser = Resolution {
            spatial: [3, 5, 3],
            temporal: 3,
        };
        assert!(f.upsample(coarser).is_err());
        // Linear ramps are reproduced exactly.
        let mut ramp = f.clone();
        for plane in &mut ramp.planes {
            for b in 0..plane.b_len {
                for a in 0..plane.a_len {
                    let o = plane.offset(a, b);
                    for c in 0..plane.channels {
                        plane.data[o + c] = 0.3 * a as f64 / (plane.a_len - 1) as f64
                            - 0.7 * b as f64 / (plane.b_len - 1) as f64
                            + c as f64;
                    }
                }
            }
        }
        let fine = Resolution {
            spatial: [9, 7, 8],
            temporal: 5,
        };
        let up = ramp.upsample(fine).unwrap();
        for plane in &up.planes {
            for b in 0..plane.b_len {
                for a in 0..plane.a_len {
                    let expected = 0.3 * a as f64 / (plane.a_len - 1) as f64
                        - 0.7 * b as f64 / (plane.b_len - 1) as f64;
                    assert!((plane.value(a, b, 1) - 1.0 - expected).abs() < 1e-12);
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let u: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.0..=1.0));
            let a = ramp.query_feature(u).unwrap().feature;
            let b = up.query_feature(u).unwrap().feature;
            // Products of linear functions are bilinear per plane; node refinement
            // keeps each plane identical as a function.
            assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-9));
        }
    }

    #[test]
    fn zero_upstream_zero_gradient() {
        let f = small(1);
        let g = f.query_backward([0.2, 0.3, 0.4, 0.5], &[0.0, 0.0, 1.0], 0.0, &[0.0; 3]).unwrap();
        assert!(g.is_zero());
    }

    #[test]
    fn single_pair_product_rule() {
        let mut f = small(11);
        f.ranks = [1, 1, 1];
        for plane in &mut f.planes {
            *plane = FeaturePlane::zeros(plane.a_len, plane.b_len, 4);
        }
        f.vectors = vec![vec![0.0; 4]; 3];
        f.planes[0].data.fill(0.5);
        f.planes[1].data.fill(-2.0);
        f.vectors[0] = vec![3.0; 4];
        let loc = f.locate([0.5, 0.5, 0.5, 0.5]).unwrap();
        let (mut sampled, mut feat) = (Vec::new(), Vec::new());
        f.feature_at(&loc, &mut sampled, &mut feat);
        assert!(feat.iter().all(|&x| (x + 3.0).abs() < 1e-12));
        let mut grads = FieldGradients::zeros_like(&f);
        f.feature_backward(&loc, &sampled, &[1.0, 0.0, 0.0, 0.0], &mut grads, &mut Vec::new());
        // ∂f₀/∂v = s·t, summed plane gradients = t·v and s·v.
        assert!((grads.vectors[0][0] + 1.0).abs() < 1e-12);
        let sum0: f64 = grads.planes[0].iter().sum();
        let sum1: f64 = grads.planes[1].iter().sum();
        assert!((sum0 + 6.0).abs() < 1e-12 && (sum1 - 1.5).abs() < 1e-12);
    }

    #[test]
    fn point_gradients_match_finite_differences() {
        let f = small(21);
        let coords = [0.37, 0.61, 0.22, 0.8];
        let dir = [0.0, 0.6, 0.8];
        let (ws, wc) = (0.9, [0.4, -0.2, 0.7]);
        let objective = |field: &HexPlaneField| {
            let q = field.query_feature(coords).unwrap();
            let (s, c) = field.decoder.decode(&q.feature, &dir);
            ws * s + (0..3).map(|i| wc[i] * c[i]).sum::<f64>()
        };
        let grads = f.query_backward(coords, &dir, ws, &wc).unwrap();
        let flat: Vec<f64> = grads.slices().iter().flat_map(|s| s.iter().copied()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let total = flat.len();
        let mut checked = 0;
        for _ in 0..400 {
            let idx = rng.random_range(0..total);
            let analytic = flat[idx];
            let h = 1e-4;
            let mut plus = f.clone();
            let mut minus = f.clone();
            nudge(&mut plus, idx, h);
            nudge(&mut minus, idx, -h);
            let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
            let err = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-6);
            assert!(err < 1e-3 || (fd - analytic).abs() < 1e-9, "param {idx}: {fd} vs {analytic}");
            checked += 1;
        }
        assert_eq!(checked, 400);
    }

    fn nudge(field: &mut HexPlaneField, mut idx: usize, h: f64) {
        for (_, block) in field.parameters_mut() {
            if idx < block.len() {
                block[idx] += h;
                return;
            }
            idx -= block.len();
        }
        panic!("index out of range");
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let f = small(13);
        let mut buf = Vec::new();
        f.save(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"HXPF");
        let g = HexPlaneField::load(&mut buf.as_slice()).unwrap();
        assert_eq!(f, g);
        assert!(matches!(
            HexPlaneField::load(&mut &buf[..buf.len() - 3]),
            Err(FieldError::Checkpoint(_))
        ));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(HexPlaneField::load(&mut bad.as_slice()).is_err());
    }
}
