//! Rigid-body geometry on SE(3) and the pinhole camera model.
//!
//! Poses map points from one frame into another (`x' = R x + t`). Increments
//! are applied on the left: `retract(G, ξ) = exp(ξ) · G`. Twists are ordered
//! translational part first, `(v, ω)`.

use nalgebra::{Matrix2x3, Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector2, Vector3, Vector6};
use thiserror::Error;

use crate::grid::Grid;

/// Points closer than this along the optical axis are treated as behind the camera.
pub const MIN_DEPTH: f64 = 1e-8;

const SMALL_ANGLE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("point behind camera (z = {0})")]
    BehindCamera(f64),
    #[error("invalid inverse depth {0}")]
    InvalidDepth(f64),
}

/// Tangent-space increment of SE(3).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Twist {
    pub v: Vector3<f64>,
    pub w: Vector3<f64>,
}

impl Twist {
    pub fn new(v: Vector3<f64>, w: Vector3<f64>) -> Self {
        Self { v, w }
    }

    pub fn zero() -> Self {
        Self {
            v: Vector3::zeros(),
            w: Vector3::zeros(),
        }
    }

    pub fn from_vector(x: &Vector6<f64>) -> Self {
        Self {
            v: Vector3::new(x[0], x[1], x[2]),
            w: Vector3::new(x[3], x[4], x[5]),
        }
    }

    pub fn to_vector(&self) -> Vector6<f64> {
        Vector6::new(self.v.x, self.v.y, self.v.z, self.w.x, self.w.y, self.w.z)
    }

    pub fn is_finite(&self) -> bool {
        self.v.iter().chain(self.w.iter()).all(|x| x.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.to_vector().norm()
    }
}

/// Rigid transform stored as a unit quaternion and a translation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PoseSE3 {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Default for PoseSE3 {
    fn default() -> Self {
        Self::identity()
    }
}

impl PoseSE3 {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    /// Builds a pose from raw quaternion components, renormalizing them.
    pub fn from_quaternion_xyzw(
        translation: Vector3<f64>,
        qx: f64,
        qy: f64,
        qz: f64,
        qw: f64,
    ) -> Result<Self, GeometryError> {
        let q = Quaternion::new(qw, qx, qy, qz);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 || !translation.iter().all(|x| x.is_finite()) {
            return Err(GeometryError::InvalidArgument(format!(
                "cannot build pose from quaternion ({qx}, {qy}, {qz}, {qw})"
            )));
        }
        Ok(Self::new(UnitQuaternion::new_normalize(q), translation))
    }

    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        let q = self.rotation * other.rotation;
        PoseSE3 {
            rotation: UnitQuaternion::new_normalize(q.into_inner()),
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> PoseSE3 {
        let r_inv = self.rotation.inverse();
        PoseSE3 {
            rotation: r_inv,
            translation: -(r_inv * self.translation),
        }
    }

    /// Adjoint in the `(v, ω)` ordering: `exp(Ad ξ) = G exp(ξ) G⁻¹`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let r = self.rotation_matrix();
        let tr = skew(&self.translation) * r;
        let mut ad = Matrix6::zeros();
        ad.fixed_view_mut::<3, 3>(0, 0).copy_from(&r);
        ad.fixed_view_mut::<3, 3>(0, 3).copy_from(&tr);
        ad.fixed_view_mut::<3, 3>(3, 3).copy_from(&r);
        ad
    }

    pub fn is_finite(&self) -> bool {
        self.translation.iter().all(|x| x.is_finite())
            && self.rotation.coords.iter().all(|x| x.is_finite())
    }

    /// Camera center when `self` maps world points into the camera frame.
    pub fn center(&self) -> Vector3<f64> {
        self.inverse().translation
    }
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map from a twist to a rigid transform (closed-form Rodrigues).
pub fn se3_exp(xi: &Twist) -> Result<PoseSE3, GeometryError> {
    if !xi.is_finite() {
        return Err(GeometryError::InvalidArgument(format!(
            "non-finite twist {:?}",
            xi.to_vector()
        )));
    }
    let theta = xi.w.norm();
    let w = skew(&xi.w);
    let w2 = w * w;
    let (rotation, v_mat) = if theta < SMALL_ANGLE {
        let q = Quaternion::new(1.0, 0.5 * xi.w.x, 0.5 * xi.w.y, 0.5 * xi.w.z);
        (
            UnitQuaternion::new_normalize(q),
            Matrix3::identity() + 0.5 * w + w2 / 6.0,
        )
    } else {
        let (s, c) = theta.sin_cos();
        let theta2 = theta * theta;
        let b = (1.0 - c) / theta2;
        let cc = (theta - s) / (theta2 * theta);
        (
            UnitQuaternion::from_scaled_axis(xi.w),
            Matrix3::identity() + b * w + cc * w2,
        )
    };
    Ok(PoseSE3 {
        rotation,
        translation: v_mat * xi.v,
    })
}

/// Logarithm map, inverse of [`se3_exp`] for rotation angles below π.
pub fn se3_log(pose: &PoseSE3) -> Twist {
    let omega = pose.rotation.scaled_axis();
    let theta = omega.norm();
    let w = skew(&omega);
    let w2 = w * w;
    let v_inv = if theta < SMALL_ANGLE {
        Matrix3::identity() - 0.5 * w + w2 / 12.0
    } else {
        let half = 0.5 * theta;
        let coef = (1.0 - half * half.cos() / half.sin()) / (theta * theta);
        Matrix3::identity() - 0.5 * w + coef * w2
    };
    Twist {
        v: v_inv * pose.translation,
        w: omega,
    }
}

/// Left-multiplicative retraction `exp(ξ) · G`.
pub fn retract(pose: &PoseSE3, xi: &Twist) -> Result<PoseSE3, GeometryError> {
    if *xi == Twist::zero() {
        return Ok(*pose);
    }
    Ok(se3_exp(xi)?.compose(pose))
}

/// Pinhole intrinsics; pixel centers sit at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self, GeometryError> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && self.cx >= 0.0
            && self.cx < self.width as f64
            && self.cy >= 0.0
            && self.cy < self.height as f64;
        if ok {
            Ok(())
        } else {
            Err(GeometryError::InvalidArgument(format!(
                "invalid intrinsics {self:?}"
            )))
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Direction `((u-cx)/fx, (v-cy)/fy, 1)` through pixel `p`.
    pub fn ray(&self, p: &Vector2<f64>) -> Vector3<f64> {
        Vector3::new((p.x - self.cx) / self.fx, (p.y - self.cy) / self.fy, 1.0)
    }
}

pub fn project(k: &CameraIntrinsics, x: &Vector3<f64>) -> Result<Vector2<f64>, GeometryError> {
    if !(x.z > MIN_DEPTH) {
        return Err(GeometryError::BehindCamera(x.z));
    }
    Ok(Vector2::new(
        k.fx * x.x / x.z + k.cx,
        k.fy * x.y / x.z + k.cy,
    ))
}

/// Jacobian of [`project`] with respect to the 3D point.
pub fn project_jacobian(k: &CameraIntrinsics, x: &Vector3<f64>) -> Matrix2x3<f64> {
    let iz = 1.0 / x.z;
    let iz2 = iz * iz;
    Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * x.x * iz2,
        0.0,
        k.fy * iz,
        -k.fy * x.y * iz2,
    )
}

pub fn backproject(
    k: &CameraIntrinsics,
    p: &Vector2<f64>,
    inverse_depth: f64,
) -> Result<Vector3<f64>, GeometryError> {
    if !(inverse_depth > 0.0) || !inverse_depth.is_finite() {
        return Err(GeometryError::InvalidDepth(inverse_depth));
    }
    Ok(k.ray(p) / inverse_depth)
}

/// Per-pixel inverse depth with validity.
#[derive(Clone, Debug, PartialEq)]
pub struct InverseDepthMap {
    pub values: Grid<f64>,
    pub valid: Grid<bool>,
}

impl InverseDepthMap {
    pub fn constant(width: usize, height: usize, value: f64) -> Self {
        Self {
            values: Grid::filled(width, height, value),
            valid: Grid::filled(width, height, true),
        }
    }

    /// Converts metric depth (`z`) to inverse depth; non-positive or non-finite depth is invalid.
    pub fn from_depth(depth: &Grid<f64>) -> Self {
        let valid = depth.map(|&z| z.is_finite() && z > 0.0);
        let values = depth.map(|&z| if z.is_finite() && z > 0.0 { 1.0 / z } else { 0.0 });
        Self { values, valid }
    }

    pub fn width(&self) -> usize {
        self.values.width()
    }

    pub fn height(&self) -> usize {
        self.values.height()
    }

    #[inline]
    pub fn at(&self, i: usize) -> Option<f64> {
        let d = self.values.as_slice()[i];
        (self.valid.as_slice()[i] && d > 0.0).then_some(d)
    }

    /// Mean over valid entries.
    pub fn mean(&self) -> Option<f64> {
        let (s, n) = (0..self.values.len())
            .filter_map(|i| self.at(i))
            .fold((0.0, 0usize), |(s, n), d| (s + d, n + 1));
        (n > 0).then(|| s / n as f64)
    }
}

/// Predicted correspondences of every pixel of frame `i` in frame `j`.
#[derive(Clone, Debug, PartialEq)]
pub struct Reprojection {
    pub points: Grid<Vector2<f64>>,
    pub valid: Grid<bool>,
}

/// Maps pixel `p` with inverse depth `d` through `relative` into the other image.
pub fn reproject_point(
    relative: &PoseSE3,
    k: &CameraIntrinsics,
    p: &Vector2<f64>,
    inverse_depth: f64,
) -> Result<Vector2<f64>, GeometryError> {
    let x = backproject(k, p, inverse_depth)?;
    project(k, &relative.transform_point(&x))
}

/// Dense `Π(G_ij ∘ Π⁻¹(p, d))` over the whole pixel grid.
pub fn reproject(
    relative: &PoseSE3,
    k: &CameraIntrinsics,
    depth: &InverseDepthMap,
) -> Result<Reprojection, GeometryError> {
    if depth.width() != k.width || depth.height() != k.height || !depth.values.same_shape(&depth.valid)
    {
        return Err(GeometryError::InvalidArgument(format!(
            "depth map {}x{} does not match camera {}x{}",
            depth.width(),
            depth.height(),
            k.width,
            k.height
        )));
    }
    let mut points = Grid::filled(k.width, k.height, Vector2::zeros());
    let mut valid = Grid::filled(k.width, k.height, false);
    for i in 0..points.len() {
        let (x, y) = points.coords(i);
        let p = Vector2::new(x as f64, y as f64);
        let Some(d) = depth.at(i) else { continue };
        if let Ok(q) = reproject_point(relative, k, &p, d) {
            points.as_mut_slice()[i] = q;
            valid.as_mut_slice()[i] = true;
        }
    }
    Ok(Reprojection { points, valid })
}

/// Reprojected pixel together with its derivatives.
#[derive(Clone, Copy, Debug)]
pub struct ReprojectionJacobian {
    pub pixel: Vector2<f64>,
    /// Derivative w.r.t. a left increment on the relative pose, `exp(ξ) G_ij`.
    pub d_relative: nalgebra::Matrix2x6<f64>,
    /// Derivative w.r.t. the inverse depth of the source pixel.
    pub d_inverse_depth: Vector2<f64>,
    /// The transformed point in the target camera frame.
    pub point: Vector3<f64>,
}

pub fn reproject_point_jacobian(
    relative: &PoseSE3,
    k: &CameraIntrinsics,
    p: &Vector2<f64>,
    inverse_depth: f64,
) -> Result<ReprojectionJacobian, GeometryError> {
    let ray = k.ray(p);
    let xi = backproject(k, p, inverse_depth)?;
    let xj = relative.transform_point(&xi);
    let pixel = project(k, &xj)?;
    let jp = project_jacobian(k, &xj);
    let mut dx_dxi = nalgebra::Matrix3x6::zeros();
    dx_dxi
        .fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&Matrix3::identity());
    dx_dxi.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(&xj)));
    let dx_dd = relative.rotation * (-ray / (inverse_depth * inverse_depth));
    Ok(ReprojectionJacobian {
        pixel,
        d_relative: jp * dx_dxi,
        d_inverse_depth: jp * dx_dd,
        point: xj,
    })
}
