//! Photometric and total-variation losses.

use super::RenderError;
use crate::field::{FeaturePlane, FieldGradients, HexPlaneField};

/// Mean over the batch of the squared color error, `(1/|R|) Σ ‖C − Ĉ‖²`.
pub fn loss_rgb(rendered: &[[f64; 3]], target: &[[f64; 3]]) -> Result<f64, RenderError> {
    if rendered.is_empty() || rendered.len() != target.len() {
        return Err(RenderError::InvalidArgument(format!(
            "need equal non-empty batches, got {} and {}",
            rendered.len(),
            target.len()
        )));
    }
    let sum: f64 = rendered
        .iter()
        .zip(target)
        .map(|(c, t)| (0..3).map(|i| (c[i] - t[i]).powi(2)).sum::<f64>())
        .sum();
    Ok(sum / rendered.len() as f64)
}

/// `(2/b) Σ_c [(1/N) Σ Δ_first² + (λ/M) Σ Δ_second²]` over the channels picked by
/// `select`, where `N`/`M` count the differences along each dimension. If `grad`
/// is given, `scale · ∂/∂x` is added to it.
pub fn loss_tv_plane(
    plane: &FeaturePlane,
    second_weight: f64,
    batch: usize,
    select: impl Fn(usize) -> bool,
    grad: Option<(&mut [f64], f64)>,
) -> Result<f64, RenderError> {
    let (a_len, b_len, ch) = (plane.a_len, plane.b_len, plane.channels);
    if a_len < 2 || b_len < 2 || batch == 0 {
        return Err(RenderError::InvalidArgument(format!(
            "total variation needs a 2×2 grid and a non-empty batch, got {a_len}×{b_len}, b = {batch}"
        )));
    }
    let wa = 2.0 / (batch as f64 * ((a_len - 1) * b_len) as f64);
    let wb = 2.0 * second_weight / (batch as f64 * (a_len * (b_len - 1)) as f64);
    let channels: Vec<usize> = (0..ch).filter(|&c| select(c)).collect();
    let data = &plane.data;
    let (mut first, mut second) = (0.0, 0.0);
    let mut grad = grad;
    for b in 0..b_len {
        for a in 0..a_len {
            let o = plane.offset(a, b);
            let right = (a + 1 < a_len).then(|| plane.offset(a + 1, b));
            let down = (b + 1 < b_len).then(|| plane.offset(a, b + 1));
            for &c in &channels {
                if let Some(r) = right {
                    let d = data[o + c] - data[r + c];
                    first += d * d;
                    if let Some((g, s)) = grad.as_mut() {
                        g[o + c] += *s * 2.0 * wa * d;
                        g[r + c] -= *s * 2.0 * wa * d;
                    }
                }
                if let Some(n) = down {
                    let d = data[o + c] - data[n + c];
                    second += d * d;
                    if let Some((g, s)) = grad.as_mut() {
                        g[o + c] += *s * 2.0 * wb * d;
                        g[n + c] -= *s * 2.0 * wb * d;
                    }
                }
            }
        }
    }
    Ok(wa * first + wb * second)
}

/// Spatial-plane total variation over all channels.
pub fn loss_tv_spatial(plane: &FeaturePlane, batch: usize) -> Result<f64, RenderError> {
    loss_tv_plane(plane, 1.0, batch, |_| true, None)
}

/// Spatio-temporal total variation; the second (time) dimension is scaled by `lambda_ts`.
pub fn loss_tv_spatiotemporal(plane: &FeaturePlane, lambda_ts: f64, batch: usize) -> Result<f64, RenderError> {
    loss_tv_plane(plane, lambda_ts, batch, |_| true, None)
}

/// Total variation split into density-feature and color-feature channels.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TvLosses {
    pub sigma: f64,
    pub rgb: f64,
}

/// Sums plane total variation over all six planes. Channel `c` feeds the
/// density head when `c mod F < F/2`. Planes with a time axis use `lambda_ts`.
/// With `grad`, adds `∂(ws·L_σ + wc·L_rgb)` for the given weights.
pub fn tv_losses(
    field: &HexPlaneField,
    lambda_ts: f64,
    batch: usize,
    mut grad: Option<(&mut FieldGradients, f64, f64)>,
) -> Result<TvLosses, RenderError> {
    let f = field.feature_dim;
    let half = f / 2;
    let mut out = TvLosses::default();
    for (p, plane) in field.planes.iter().enumerate() {
        let lambda = if p % 2 == 1 { lambda_ts } else { 1.0 };
        let (gs, gc) = match grad.as_mut() {
            Some((g, ws, wc)) => {
                let buf = g.planes[p].as_mut_slice();
                // Two passes share the buffer; split by reborrowing.
                let s = loss_tv_plane(plane, lambda, batch, |c| c % f < half, Some((&mut *buf, *ws)))?;
                let c = loss_tv_plane(plane, lambda, batch, |c| c % f >= half, Some((buf, *wc)))?;
                (s, c)
            }
            None => (
                loss_tv_plane(plane, lambda, batch, |c| c % f < half, None)?,
                loss_tv_plane(plane, lambda, batch, |c| c % f >= half, None)?,
            ),
        };
        out.sigma += gs;
        out.rgb += gc;
    }
    Ok(out)
}

/// Loss weights in effect at one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_tv: f64,
    pub lambda_ts: f64,
    pub w_rgb_tv: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub rgb: f64,
    pub tv_sigma: f64,
    pub tv_rgb: f64,
}

/// `L_RGB + λ_TV (L_TV,σ + w · L_TV,RGB)` with the batch size taken from `rendered`.
pub fn total_loss(
    rendered: &[[f64; 3]],
    target: &[[f64; 3]],
    field: &HexPlaneField,
    weights: &LossWeights,
) -> Result<LossBreakdown, RenderError> {
    let rgb = loss_rgb(rendered, target)?;
    if weights.lambda_tv == 0.0 {
        return Ok(LossBreakdown {
            total: rgb,
            rgb,
            ..Default::default()
        });
    }
    let tv = tv_losses(field, weights.lambda_ts, rendered.len(), None)?;
    Ok(LossBreakdown {
        total: rgb + weights.lambda_tv * (tv.sigma + weights.w_rgb_tv * tv.rgb),
        rgb,
        tv_sigma: tv.sigma,
        tv_rgb: tv.rgb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{Bounds, Resolution};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn plane(a_len: usize, b_len: usize, rows: &[&[f64]]) -> FeaturePlane {
        // rows[i][j] = x_{i,j}: i along the first dimension, j along the second.
        let mut p = FeaturePlane::zeros(a_len, b_len, 1);
        for (i, row) in rows.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let o = p.offset(i, j);
                p.data[o] = v;
            }
        }
        p
    }

    /// Scalar reference with explicit nested loops and per-term normalizers.
    fn tv_reference(p: &FeaturePlane, lambda: f64, batch: usize, channels: &[usize]) -> f64 {
        let n = ((p.a_len - 1) * p.b_len) as f64;
        let m = (p.a_len * (p.b_len - 1)) as f64;
        let mut total = 0.0;
        for &c in channels {
            let mut s1 = 0.0;
            let mut s2 = 0.0;
            for i in 0..p.a_len {
                for j in 0..p.b_len {
                    if i + 1 < p.a_len {
                        s1 += (p.value(i, j, c) - p.value(i + 1, j, c)).powi(2);
                    }
                    if j + 1 < p.b_len {
                        s2 += (p.value(i, j, c) - p.value(i, j + 1, c)).powi(2);
                    }
                }
            }
            total += s1 / n + lambda * s2 / m;
        }
        2.0 / batch as f64 * total
    }

    #[test]
    fn rgb_loss_examples() {
        let c = [[0.2, 0.3, 0.4]];
        assert_eq!(loss_rgb(&c, &c).unwrap(), 0.0);
        let one = loss_rgb(&[[0.1, 0.0, 0.0]], &[[0.0; 3]]).unwrap();
        assert!((one - 0.01).abs() < 1e-15);
        let two = loss_rgb(&[[1.0, 0.0, 0.0], [0.0, 1.0, 1.0]], &[[0.0; 3]; 2]).unwrap();
        assert_eq!(two, 1.5);
        assert!(loss_rgb(&[], &[]).is_err());
        assert!(loss_rgb(&c, &[]).is_err());
    }

    #[test]
    fn tv_hand_examples() {
        let p = plane(2, 2, &[&[0.0, 1.0], &[0.0, 1.0]]);
        assert_eq!(loss_tv_spatial(&p, 1).unwrap(), 2.0);
        let q = plane(2, 2, &[&[0.0, 0.0], &[1.0, 1.0]]);
        assert_eq!(loss_tv_spatiotemporal(&q, 20.0, 1).unwrap(), 2.0);
        let qt = plane(2, 2, &[&[0.0, 1.0], &[0.0, 1.0]]);
        assert_eq!(loss_tv_spatiotemporal(&qt, 20.0, 1).unwrap(), 40.0);
        assert!(loss_tv_spatial(&FeaturePlane::zeros(1, 4, 1), 1).is_err());
    }

    #[test]
    fn tv_constant_and_ramp() {
        let mut p = FeaturePlane::zeros(5, 4, 3);
        p.data.fill(0.7);
        assert_eq!(loss_tv_spatial(&p, 8).unwrap(), 0.0);
        assert_eq!(loss_tv_spatiotemporal(&p, 20.0, 8).unwrap(), 0.0);
        // Ramp of step s along the first dimension: every first-dim term is s².
        let s = 0.3;
        let mut r = FeaturePlane::zeros(5, 4, 1);
        for b in 0..4 {
            for a in 0..5 {
                let o = r.offset(a, b);
                r.data[o] = s * a as f64;
            }
        }
        let expected = 2.0 / 2.0 * s * s;
        assert!((loss_tv_spatial(&r, 2).unwrap() - expected).abs() < 1e-15);
    }

    #[test]
    fn tv_matches_reference_on_random_planes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let (a, b, c) = (rng.random_range(2..7), rng.random_range(2..7), rng.random_range(1..4));
            let mut p = FeaturePlane::zeros(a, b, c);
            for x in &mut p.data {
                *x = rng.random_range(-1.0..1.0);
            }
            let batch = rng.random_range(1..300);
            let lambda = rng.random_range(0.5..30.0);
            let all: Vec<usize> = (0..c).collect();
            let got = loss_tv_spatiotemporal(&p, lambda, batch).unwrap();
            assert!((got - tv_reference(&p, lambda, batch, &all)).abs() < 1e-10);
            assert_eq!(
                loss_tv_spatiotemporal(&p, 1.0, batch).unwrap(),
                loss_tv_spatial(&p, batch).unwrap()
            );
        }
    }

    fn tiny_field(seed: u64) -> HexPlaneField {
        HexPlaneField::new(
            Bounds {
                min: [0.0; 4],
                max: [1.0; 4],
            },
            Resolution {
                spatial: [3, 4, 2],
                temporal: 3,
            },
            [2, 1, 1],
            4,
            4,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn total_loss_combines_terms() {
        let field = tiny_field(1);
        let rendered = [[0.1, 0.2, 0.3], [0.5, 0.5, 0.5]];
        let target = [[0.0, 0.2, 0.1], [0.4, 0.9, 0.5]];
        let no_tv = LossWeights {
            lambda_tv: 0.0,
            lambda_ts: 20.0,
            w_rgb_tv: 0.1,
        };
        let b = total_loss(&rendered, &target, &field, &no_tv).unwrap();
        assert_eq!(b.total, loss_rgb(&rendered, &target).unwrap());

        let w = LossWeights {
            lambda_tv: 0.005,
            ..no_tv
        };
        let b = total_loss(&rendered, &target, &field, &w).unwrap();
        let (mut sigma, mut rgb) = (0.0, 0.0);
        for (p, plane) in field.planes.iter().enumerate() {
            let lambda = if p % 2 == 1 { 20.0 } else { 1.0 };
            let dens: Vec<usize> = (0..plane.channels).filter(|c| c % 4 < 2).collect();
            let col: Vec<usize> = (0..plane.channels).filter(|c| c % 4 >= 2).collect();
            sigma += tv_reference(plane, lambda, 2, &dens);
            rgb += tv_reference(plane, lambda, 2, &col);
        }
        let expected = loss_rgb(&rendered, &target).unwrap() + 0.005 * (sigma + 0.1 * rgb);
        assert!((b.total - expected).abs() < 1e-10);

        let mut flat = field.clone();
        for p in &mut flat.planes {
            p.data.fill(0.25);
        }
        assert_eq!(total_loss(&target, &target, &flat, &w).unwrap().total, 0.0);
    }

    #[test]
    fn tv_gradient_matches_finite_differences() {
        let field = tiny_field(7);
        let (ws, wc) = (0.8, 0.3);
        let objective = |f: &HexPlaneField| {
            let t = tv_losses(f, 20.0, 3, None).unwrap();
            ws * t.sigma + wc * t.rgb
        };
        let mut g = FieldGradients::zeros_like(&field);
        tv_losses(&field, 20.0, 3, Some((&mut g, ws, wc))).unwrap();
        let h = 1e-6;
        for p in 0..6 {
            for i in (0..field.planes[p].data.len()).step_by(3) {
                let mut plus = field.clone();
                plus.planes[p].data[i] += h;
                let mut minus = field.clone();
                minus.planes[p].data[i] -= h;
                let fd = (objective(&plus) - objective(&minus)) / (2.0 * h);
                assert!((fd - g.planes[p][i]).abs() < 1e-6, "plane {p} #{i}: {fd} vs {}", g.planes[p][i]);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn tv_is_nonnegative_and_shift_invariant(
            a in 2usize..6,
            b in 2usize..6,
            values in proptest::collection::vec(-1.0f64..1.0, 36),
            shift in -5.0f64..5.0,
            lambda in 0.0f64..30.0,
            batch in 1usize..64,
        ) {
            let mut p = FeaturePlane::zeros(a, b, 1);
            p.data.copy_from_slice(&values[..a * b]);
            let base = loss_tv_spatiotemporal(&p, lambda, batch).unwrap();
            proptest::prop_assert!(base >= 0.0);
            let mut q = p.clone();
            q.data.iter_mut().for_each(|x| *x += shift);
            let shifted = loss_tv_spatiotemporal(&q, lambda, batch).unwrap();
            proptest::prop_assert!((base - shifted).abs() <= 1e-12 * (1.0 + base));
            proptest::prop_assert_eq!(
                loss_tv_spatiotemporal(&p, 1.0, batch).unwrap(),
                loss_tv_spatial(&p, batch).unwrap()
            );
        }
    }
}
