use nalgebra::{Matrix6, Vector2, Vector6};

use super::solver::robust;
use super::{BaConfig, BaError, FlowEstimate};
use crate::geometry::{
    reproject_point, reproject_point_jacobian, se3_exp, CameraIntrinsics, InverseDepthMap, PoseSE3,
    Twist,
};
use crate::grid::Grid;

struct PoseProblem<'a> {
    k: &'a CameraIntrinsics,
    reference: &'a PoseSE3,
    depth: &'a InverseDepthMap,
    flow: &'a FlowEstimate,
    pixels: Vec<usize>,
    /// Geman–McClure scale; 0 is plain least squares.
    robust_scale: f64,
}

impl PoseProblem<'_> {
    fn relative(&self, target: &PoseSE3) -> PoseSE3 {
        target.compose(&self.reference.inverse())
    }

    fn point(&self, i: usize) -> (Vector2<f64>, f64, f64) {
        let (x, y) = self.flow.vectors.coords(i);
        let d = self.depth.values.as_slice()[i];
        (Vector2::new(x as f64, y as f64), d, self.flow.confidence.as_slice()[i])
    }

    fn cost(&self, target: &PoseSE3) -> (f64, usize) {
        let rel = self.relative(target);
        let mut sum = 0.0;
        let mut invalid = 0;
        for &i in &self.pixels {
            let (p, d, w) = self.point(i);
            match reproject_point(&rel, self.k, &p, d) {
                Ok(q) => sum += w * robust((p + self.flow.vectors.as_slice()[i] - q).norm_squared(), self.robust_scale).0,
                Err(_) => invalid += 1,
            }
        }
        (sum, invalid)
    }

    fn normal_equations(&self, target: &PoseSE3) -> (Matrix6<f64>, Vector6<f64>, f64, usize) {
        let rel = self.relative(target);
        let mut h = Matrix6::zeros();
        let mut g = Vector6::zeros();
        let mut cost = 0.0;
        let mut invalid = 0;
        for &i in &self.pixels {
            let (p, d, w) = self.point(i);
            let Ok(jac) = reproject_point_jacobian(&rel, self.k, &p, d) else {
                invalid += 1;
                continue;
            };
            let r = p + self.flow.vectors.as_slice()[i] - jac.pixel;
            let (c, irls) = robust(r.norm_squared(), self.robust_scale);
            let j = -jac.d_relative;
            let jtw = j.transpose() * (w * irls);
            h += jtw * j;
            g += jtw * r;
            cost += w * c;
        }
        (h, g, cost, invalid)
    }
}

/// Pose-only Gauss–Newton for one frame against a keyframe whose depth is frozen.
///
/// `reference` and the returned pose are world-to-camera. `flow` maps reference
/// pixels into the target frame; pixels under `mask` (in reference coordinates)
/// or with zero confidence are excluded. A positive `config.robust_scale`
/// switches to the Geman–McClure cost.
#[allow(clippy::too_many_arguments)]
pub fn motion_only_ba(
    k: &CameraIntrinsics,
    reference: &PoseSE3,
    depth: &InverseDepthMap,
    target_init: &PoseSE3,
    flow: &FlowEstimate,
    mask: Option<&Grid<bool>>,
    config: &BaConfig,
    frame: usize,
) -> Result<PoseSE3, BaError> {
    if flow.width() != k.width
        || flow.height() != k.height
        || depth.width() != k.width
        || depth.height() != k.height
        || mask.is_some_and(|m| !m.same_shape(&flow.confidence))
    {
        return Err(BaError::InvalidArgument(
            "flow, depth and mask must match the camera resolution".into(),
        ));
    }
    let pixels: Vec<usize> = (0..flow.confidence.len())
        .filter(|&i| flow.confidence.as_slice()[i] > 0.0)
        .filter(|&i| depth.at(i).is_some())
        .filter(|&i| !mask.is_some_and(|m| m.as_slice()[i]))
        .collect();
    if pixels.len() < config.min_valid_pixels.max(1) {
        return Err(BaError::DegenerateFrame {
            frame,
            valid: pixels.len(),
            required: config.min_valid_pixels.max(1),
        });
    }
    let problem = PoseProblem {
        k,
        reference,
        depth,
        flow,
        pixels,
        robust_scale: config.robust_scale,
    };
    let mut pose = *target_init;
    let mut lambda = config.damping_init;
    for _ in 0..config.max_iterations {
        let (h, g, before, invalid_before) = problem.normal_equations(&pose);
        if g.iter().all(|&x| x == 0.0) {
            break;
        }
        let mut accepted = false;
        while lambda <= config.damping_max {
            let mut hd = h;
            for i in 0..6 {
                hd[(i, i)] = super::solver::damp(hd[(i, i)], lambda);
            }
            let step = hd.cholesky().map(|c| c.solve(&(-g)));
            if let Some(step) = step.filter(|s| s.iter().all(|x| x.is_finite())) {
                let xi = Twist::from_vector(&step);
                let cand = se3_exp(&xi)
                    .map_err(|e| BaError::InvalidArgument(e.to_string()))?
                    .compose(&pose);
                let (after, invalid_after) = problem.cost(&cand);
                if after < before && invalid_after <= invalid_before {
                    pose = cand;
                    lambda = (lambda / config.damping_decrease).max(1e-12);
                    accepted = true;
                    if (before - after) / before.max(1e-300) < config.convergence_tol {
                        return Ok(pose);
                    }
                    break;
                }
            }
            lambda *= config.damping_scale;
        }
        if !accepted {
            break;
        }
    }
    Ok(pose)
}
