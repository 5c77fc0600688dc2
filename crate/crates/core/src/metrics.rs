//! Trajectory alignment, ATE-RMS, PSNR and SSIM.

use std::fmt::Write as _;

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::ba::Trajectory;
use crate::geometry::PoseSE3;
use crate::grid::{Grid, RgbImage};

/// Maximum timestamp difference for two poses to be associated, in seconds.
pub const ASSOCIATION_WINDOW: f64 = 0.02;
/// Value reported for the PSNR of identical images.
pub const PSNR_CAP: f64 = 99.0;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("only {0} pose pairs could be associated, need at least 3")]
    InsufficientOverlap(usize),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Similarity transform mapping estimate positions onto the reference.
#[derive(Clone, Debug)]
pub struct AlignmentResult {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
    pub scale: f64,
    /// Translational error of each associated pose after alignment.
    pub residuals: Vec<f64>,
    /// Associated (estimate index, reference index) pairs.
    pub pairs: Vec<(usize, usize)>,
}

impl AlignmentResult {
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p * self.scale + self.translation
    }

    /// Maps a camera-to-world pose of the estimate into the reference frame.
    pub fn apply_pose(&self, p: &PoseSE3) -> PoseSE3 {
        let r = UnitQuaternion::from_matrix(&self.rotation);
        PoseSE3::new(r * p.rotation, self.apply(&p.translation))
    }

    pub fn rms(&self) -> f64 {
        (self.residuals.iter().map(|r| r * r).sum::<f64>() / self.residuals.len() as f64).sqrt()
    }
}

/// One-to-one nearest-timestamp association within `window` seconds.
/// Closest pairs are matched first.
pub fn associate(estimate: &[f64], reference: &[f64], window: f64) -> Vec<(usize, usize)> {
    let mut candidates = Vec::new();
    for (i, &t) in estimate.iter().enumerate() {
        let j = reference.partition_point(|&r| r < t);
        for j in [j.wrapping_sub(1), j] {
            if let Some(&r) = reference.get(j) {
                let dt = (r - t).abs();
                if dt <= window {
                    candidates.push((dt, i, j));
                }
            }
        }
    }
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut used_est = vec![false; estimate.len()];
    let mut used_ref = vec![false; reference.len()];
    let mut pairs = Vec::new();
    for (_, i, j) in candidates {
        if !used_est[i] && !used_ref[j] {
            used_est[i] = true;
            used_ref[j] = true;
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

/// Closed-form least-squares alignment of estimated camera centers to the
/// reference (similarity when `with_scale`, otherwise rigid).
pub fn align(
    estimate: &Trajectory,
    reference: &Trajectory,
    with_scale: bool,
) -> Result<AlignmentResult, MetricsError> {
    let pairs = associate(estimate.stamps(), reference.stamps(), ASSOCIATION_WINDOW);
    if pairs.len() < 3 {
        return Err(MetricsError::InsufficientOverlap(pairs.len()));
    }
    let xs: Vec<Vector3<f64>> = pairs.iter().map(|&(i, _)| estimate.poses()[i].translation).collect();
    let ys: Vec<Vector3<f64>> = pairs.iter().map(|&(_, j)| reference.poses()[j].translation).collect();
    if xs == ys {
        // Exact match: skip the SVD so rounding cannot leave a residual.
        let residuals = vec![0.0; xs.len()];
        return Ok(AlignmentResult {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
            scale: 1.0,
            residuals,
            pairs,
        });
    }
    let n = pairs.len() as f64;
    let mx = xs.iter().sum::<Vector3<f64>>() / n;
    let my = ys.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        cov += (y - my) * (x - mx).transpose();
        var_x += (x - mx).norm_squared();
    }
    cov /= n;
    var_x /= n;
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let rotation = u * s * v_t;
    let scale = if with_scale {
        if var_x <= f64::EPSILON * my.norm_squared().max(1.0) {
            return Err(MetricsError::InvalidArgument(
                "estimated positions are all identical; scale is undefined".into(),
            ));
        }
        (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_x
    } else {
        1.0
    };
    let translation = my - rotation * mx * scale;
    let mut result = AlignmentResult {
        rotation,
        translation,
        scale,
        residuals: Vec::new(),
        pairs,
    };
    result.residuals = xs.iter().zip(&ys).map(|(x, y)| (result.apply(x) - y).norm()).collect();
    Ok(result)
}

/// Root-mean-square translational error after alignment.
pub fn ate_rms(estimate: &Trajectory, reference: &Trajectory, with_scale: bool) -> Result<f64, MetricsError> {
    Ok(align(estimate, reference, with_scale)?.rms())
}

fn check_shapes(a: &RgbImage, b: &RgbImage) -> Result<(), MetricsError> {
    if a.same_shape(b) && !a.is_empty() {
        Ok(())
    } else {
        Err(MetricsError::InvalidArgument(format!(
            "image shapes {}x{} and {}x{} differ or are empty",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )))
    }
}

/// Peak signal-to-noise ratio for images in `[0, 1]`, capped at [`PSNR_CAP`].
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let sum: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(p, q)| (0..3).map(|c| (p[c] - q[c]).powi(2)).sum::<f64>())
        .sum();
    let mse = sum / (3 * a.len()) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Windowed SSIM of one channel, averaged over every fully contained window.
pub fn ssim_channel(a: &Grid<f64>, b: &Grid<f64>) -> Result<f64, MetricsError> {
    if !a.same_shape(b) {
        return Err(MetricsError::InvalidArgument("channel shapes differ".into()));
    }
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(MetricsError::InvalidArgument(format!(
            "image {}x{} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window",
            a.width(),
            a.height()
        )));
    }
    let g = gaussian_window();
    let (nx, ny) = (a.width() - SSIM_WINDOW + 1, a.height() - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for y0 in 0..ny {
        for x0 in 0..nx {
            let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for (dy, gy) in g.iter().enumerate() {
                for (dx, gx) in g.iter().enumerate() {
                    let w = gx * gy;
                    let (p, q) = (*a.get(x0 + dx, y0 + dy), *b.get(x0 + dx, y0 + dy));
                    ma += w * p;
                    mb += w * q;
                    aa += w * p * p;
                    bb += w * q * q;
                    ab += w * p * q;
                }
            }
            let (va, vb, cab) = (aa - ma * ma, bb - mb * mb, ab - ma * mb);
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cab + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / (nx * ny) as f64)
}

/// SSIM computed per color channel and averaged.
pub fn ssim(a: &RgbImage, b: &RgbImage) -> Result<f64, MetricsError> {
    check_shapes(a, b)?;
    let mut sum = 0.0;
    for c in 0..3 {
        sum += ssim_channel(&a.map(|p| p[c]), &b.map(|p| p[c]))?;
    }
    Ok(sum / 3.0)
}

/// One evaluated sequence or view set.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub ate_rms: Option<f64>,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

/// Per-row metrics with Mean and Max summary rows.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    /// Name of the alignment used for ATE, e.g. `sim3` or `se3`.
    pub alignment: String,
}

fn summary(values: impl Iterator<Item = Option<f64>> + Clone) -> (Option<f64>, Option<f64>) {
    let vals: Vec<f64> = values.flatten().collect();
    if vals.is_empty() {
        return (None, None);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (Some(mean), Some(max))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

impl EvalReport {
    fn with_summary(&self) -> Vec<ReportRow> {
        let mut rows = self.rows.clone();
        if !rows.is_empty() {
            let (ate_mean, ate_max) = summary(self.rows.iter().map(|r| r.ate_rms));
            let (psnr_mean, psnr_max) = summary(self.rows.iter().map(|r| r.psnr));
            let (ssim_mean, ssim_max) = summary(self.rows.iter().map(|r| r.ssim));
            rows.push(ReportRow {
                name: "Mean".into(),
                ate_rms: ate_mean,
                psnr: psnr_mean,
                ssim: ssim_mean,
            });
            rows.push(ReportRow {
                name: "Max".into(),
                ate_rms: ate_max,
                psnr: psnr_max,
                ssim: ssim_max,
            });
        }
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("sequence,ate_rms_m[{}],psnr_db,ssim\n", self.alignment);
        for r in self.with_summary() {
            let _ = writeln!(out, "{},{},{},{}", r.name, cell(r.ate_rms), cell(r.psnr), cell(r.ssim));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let rows = self.with_summary();
        let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(8);
        let header = format!("ATE [m, {}]", self.alignment);
        let mut out = format!("{:<width$}  {:>14}  {:>10}  {:>8}\n", "sequence", header, "PSNR", "SSIM");
        for r in rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>14}  {:>10}  {:>8}",
                r.name,
                cell(r.ate_rms),
                cell(r.psnr),
                cell(r.ssim)
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trajectory(points: &[Vector3<f64>]) -> Trajectory {
        Trajectory::new(
            (0..points.len()).map(|i| i as f64 * 0.1).collect(),
            points.iter().map(|p| PoseSE3::new(UnitQuaternion::identity(), *p)).collect(),
        )
        .unwrap()
    }

    fn helix(n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|i| {
                let t = i as f64 * 0.4;
                Vector3::new(t.cos(), t.sin(), 0.1 * t)
            })
            .collect()
    }

    #[test]
    fn identical_trajectories_align_to_identity() {
        let t = trajectory(&helix(10));
        let a = align(&t, &t, true).unwrap();
        assert!((a.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!((a.scale - 1.0).abs() < 1e-12);
        assert!(a.translation.norm() < 1e-12);
        assert_eq!(a.rms(), 0.0);
        assert_eq!(ate_rms(&t, &t, false).unwrap(), 0.0);
    }

    #[test]
    fn scaled_estimate_recovers_inverse_scale() {
        let pts = helix(10);
        let doubled: Vec<_> = pts.iter().map(|p| p * 2.0).collect();
        let a = align(&trajectory(&doubled), &trajectory(&pts), true).unwrap();
        assert!((a.scale - 0.5).abs() < 1e-12);
        assert!(a.rms() < 1e-12);
    }

    #[test]
    fn rigid_alignment_absorbs_offset() {
        let pts = helix(8);
        let shifted: Vec<_> = pts.iter().map(|p| p + Vector3::new(1.0, 0.0, 0.0)).collect();
        let (e, r) = (trajectory(&shifted), trajectory(&pts));
        assert!(ate_rms(&e, &r, false).unwrap() < 1e-12);
    }

    #[test]
    fn association_window() {
        let pairs = associate(&[0.0, 0.1, 0.2, 0.5], &[0.005, 0.125, 0.19], ASSOCIATION_WINDOW);
        assert_eq!(pairs, vec![(0, 0), (2, 2)]);
        let e = Trajectory::new(vec![0.0, 1.0], vec![PoseSE3::identity(); 2]).unwrap();
        assert_eq!(ate_rms(&e, &e, true), Err(MetricsError::InsufficientOverlap(2)));
    }

    #[test]
    fn psnr_examples() {
        let a = RgbImage::filled(4, 4, [0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = RgbImage::filled(4, 4, [0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert!(psnr(&a, &RgbImage::filled(3, 4, [0.0; 3])).is_err());
    }

    #[test]
    fn ssim_examples() {
        let a = RgbImage::from_fn(16, 14, |x, y| [(x as f64) / 16.0, (y as f64) / 14.0, 0.3]);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
        let half = RgbImage::filled(12, 12, [0.5; 3]);
        let neg = half.map(|p| p.map(|v| 1.0 - v));
        assert!((ssim(&half, &neg).unwrap() - 1.0).abs() < 1e-12);
        let small = RgbImage::filled(10, 12, [0.0; 3]);
        assert!(ssim(&small, &small).is_err());
    }

    #[test]
    fn report_has_summary_rows() {
        let report = EvalReport {
            rows: vec![
                ReportRow { name: "a".into(), ate_rms: Some(1.0), psnr: Some(20.0), ssim: None },
                ReportRow { name: "b".into(), ate_rms: Some(3.0), psnr: None, ssim: None },
            ],
            alignment: "sim3".into(),
        };
        let csv = report.to_csv();
        assert!(csv.contains("Mean,2.000000,20.000000,-"));
        assert!(csv.contains("Max,3.000000,20.000000,-"));
        assert_eq!(report.to_table().lines().count(), 5);
    }

    proptest::proptest! {
        #[test]
        fn ate_is_invariant_to_similarity_transforms(
            n in 4usize..30,
            axis in proptest::array::uniform3(-3.0f64..3.0),
            shift in proptest::array::uniform3(-20.0f64..20.0),
            log_scale in -2.0f64..2.0,
            seed in 0u64..1000,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Vector3<f64>> = (0..n)
                .map(|_| Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
                .collect();
            let reference = trajectory(&pts);
            let r = UnitQuaternion::from_scaled_axis(Vector3::from(axis));
            let s = log_scale.exp();
            let t = Vector3::from(shift);
            let moved = trajectory(&pts.iter().map(|p| r * (p * s) + t).collect::<Vec<_>>());
            proptest::prop_assert!(ate_rms(&moved, &reference, true).unwrap() < 1e-9);
            let rigid = trajectory(&pts.iter().map(|p| r * p + t).collect::<Vec<_>>());
            proptest::prop_assert!(ate_rms(&rigid, &reference, false).unwrap() < 1e-9);
        }

        #[test]
        fn psnr_is_symmetric_and_capped(seed in 0u64..1000, w in 1usize..12, h in 1usize..12) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let a: RgbImage = Grid::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()]);
            let b: RgbImage = Grid::from_fn(w, h, |_, _| [rng.random(), rng.random(), rng.random()]);
            proptest::prop_assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
            proptest::prop_assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        }
    }
}
