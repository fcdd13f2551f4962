//! Gaussian scene representation.
//!
//! Attributes are stored pre-activation: scales in log-space, opacities as
//! logits. Rotations are `w, x, y, z` quaternions, normalized whenever they
//! are written. Colors are degree-0 spherical-harmonics coefficients.

use nalgebra::{Matrix3, Vector3, Vector4};
use serde::{Deserialize, Serialize};

use crate::deform::DeformationParams;
use crate::error::{Error, Result};
use crate::pose::Se3Pose;

/// Degree-0 spherical-harmonics basis constant `1 / (2√π)`.
pub const SH_C0: f64 = 0.2820947917738781;

/// Pinhole camera. Pixel `(x, y)` is sampled at its integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    #[serde(default = "default_near")]
    pub near: f64,
}

fn default_near() -> f64 {
    0.01
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            near: default_near(),
        };
        k.validate()?;
        Ok(k)
    }

    pub fn with_near(mut self, near: f64) -> Result<Self> {
        self.near = near;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.near]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid("focal lengths must be finite and positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image dimensions must be at least 1"));
        }
        if !(self.near > 0.0 && self.near < 10.0) {
            return Err(Error::invalid("near plane must lie in (0, 10)"));
        }
        Ok(())
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Intrinsics for an image downsampled by an integer factor.
    pub fn downsampled(&self, factor: usize) -> Self {
        let f = factor.max(1) as f64;
        Self {
            fx: self.fx / f,
            fy: self.fy / f,
            cx: self.cx / f,
            cy: self.cy / f,
            width: self.width / factor.max(1),
            height: self.height / factor.max(1),
            near: self.near,
        }
    }

    /// Camera-frame point to pixel coordinates.
    #[inline]
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    /// Pixel at metric depth `depth` to a camera-frame point.
    #[inline]
    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            depth * (u - self.cx) / self.fx,
            depth * (v - self.cy) / self.fy,
            depth,
        )
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn sh_to_color(sh: &Vector3<f64>) -> Vector3<f64> {
    sh.map(|c| (0.5 + SH_C0 * c).clamp(0.0, 1.0))
}

pub fn color_to_sh(rgb: &Vector3<f64>) -> Vector3<f64> {
    rgb.map(|c| (c - 0.5) / SH_C0)
}

pub fn identity_quat() -> Vector4<f64> {
    Vector4::new(1.0, 0.0, 0.0, 0.0)
}

/// Hamilton product of `w, x, y, z` quaternions.
pub fn quat_mul(a: &Vector4<f64>, b: &Vector4<f64>) -> Vector4<f64> {
    Vector4::new(
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    )
}

/// Rotation matrix of a `w, x, y, z` quaternion (normalized internally).
pub fn quat_to_rotation(q: &Vector4<f64>) -> Matrix3<f64> {
    crate::pose::quat_to_matrix(&nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]))
}

pub fn rotation_to_quat(r: &Matrix3<f64>) -> Vector4<f64> {
    let q = crate::pose::matrix_to_quat(r);
    Vector4::new(q.w, q.i, q.j, q.k)
}

/// `R·diag(exp(s))²·Rᵀ` with the quaternion normalized internally.
pub fn build_covariance(log_scale: &Vector3<f64>, rotation: &Vector4<f64>) -> Result<Matrix3<f64>> {
    if !log_scale.iter().chain(rotation.iter()).all(|v| v.is_finite()) {
        return Err(Error::invalid("covariance inputs must be finite"));
    }
    if rotation.norm() == 0.0 {
        return Err(Error::invalid("zero quaternion"));
    }
    Ok(covariance_unchecked(log_scale, &quat_to_rotation(rotation)))
}

#[inline]
pub(crate) fn covariance_unchecked(log_scale: &Vector3<f64>, r: &Matrix3<f64>) -> Matrix3<f64> {
    let s = log_scale.map(f64::exp);
    let m = Matrix3::from_columns(&[r.column(0) * s.x, r.column(1) * s.y, r.column(2) * s.z]);
    let cov = m * m.transpose();
    (cov + cov.transpose()) * 0.5
}

/// Canonical Gaussian point set with per-point deformation curves.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub rotations: Vec<Vector4<f64>>,
    pub sh_colors: Vec<Vector3<f64>>,
    pub logit_opacities: Vec<f64>,
    pub deformation: DeformationParams,
}

impl Default for GaussianCloud {
    fn default() -> Self {
        Self::new()
    }
}

impl GaussianCloud {
    /// Empty cloud without deformation curves.
    pub fn new() -> Self {
        Self::with_deformation(DeformationParams::none(0))
    }

    /// Empty cloud whose deformation layout (basis count, time span) is taken
    /// from `deformation`, which must itself be empty.
    pub fn with_deformation(deformation: DeformationParams) -> Self {
        debug_assert_eq!(deformation.len(), 0);
        Self {
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            sh_colors: Vec::new(),
            logit_opacities: Vec::new(),
            deformation,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Appends one Gaussian with zero deformation.
    pub fn push(
        &mut self,
        position: Vector3<f64>,
        log_scale: Vector3<f64>,
        rotation: Vector4<f64>,
        sh_color: Vector3<f64>,
        logit_opacity: f64,
    ) {
        self.positions.push(position);
        self.log_scales.push(log_scale);
        self.rotations.push(rotation.normalize());
        self.sh_colors.push(sh_color);
        self.logit_opacities.push(logit_opacity);
        self.deformation.push_zeroed(1);
    }

    /// Appends every Gaussian of `other`. Deformation curves of `other` are
    /// dropped and the new points receive fresh curves in this cloud's layout.
    pub fn merge_fresh(&mut self, other: &GaussianCloud) {
        self.positions.extend_from_slice(&other.positions);
        self.log_scales.extend_from_slice(&other.log_scales);
        self.rotations.extend_from_slice(&other.rotations);
        self.sh_colors.extend_from_slice(&other.sh_colors);
        self.logit_opacities.extend_from_slice(&other.logit_opacities);
        self.deformation.push_zeroed(other.len());
    }

    pub fn scale(&self, i: usize) -> Vector3<f64> {
        self.log_scales[i].map(f64::exp)
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.logit_opacities[i])
    }

    pub fn covariance(&self, i: usize) -> Matrix3<f64> {
        covariance_unchecked(&self.log_scales[i], &quat_to_rotation(&self.rotations[i]))
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.log_scales.len() != n
            || self.rotations.len() != n
            || self.sh_colors.len() != n
            || self.logit_opacities.len() != n
            || self.deformation.len() != n
        {
            return Err(Error::invalid("per-point attribute arrays differ in length"));
        }
        for i in 0..n {
            let finite = self.positions[i].iter().all(|v| v.is_finite())
                && self.log_scales[i].iter().all(|v| v.is_finite())
                && self.rotations[i].iter().all(|v| v.is_finite())
                && self.sh_colors[i].iter().all(|v| v.is_finite())
                && self.logit_opacities[i].is_finite();
            if !finite {
                return Err(Error::invalid(format!("gaussian {i} has non-finite attributes")));
            }
            if (self.rotations[i].norm() - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("gaussian {i} quaternion is not unit")));
            }
        }
        Ok(())
    }

    /// Re-normalizes all stored quaternions.
    pub fn normalize_rotations(&mut self) {
        for q in &mut self.rotations {
            *q = q.normalize();
        }
    }
}

/// Per-point gradients with the same shape as a [`GaussianCloud`]'s attributes.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGradients {
    pub positions: Vec<Vector3<f64>>,
    pub log_scales: Vec<Vector3<f64>>,
    pub rotations: Vec<Vector4<f64>>,
    pub sh_colors: Vec<Vector3<f64>>,
    pub logit_opacities: Vec<f64>,
}

impl GaussianGradients {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![Vector3::zeros(); n],
            log_scales: vec![Vector3::zeros(); n],
            rotations: vec![Vector4::zeros(); n],
            sh_colors: vec![Vector3::zeros(); n],
            logit_opacities: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.positions.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.log_scales.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rotations.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.sh_colors.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.logit_opacities.iter().all(|x| x.is_finite())
    }
}

/// Rigidly moves a cloud: `μ' = T·μ`, `r' = Q(T) ⊗ r`.
///
/// Position and rotation deformation weights are carried along (rotated by
/// `R` and left-multiplied by `Q(T)` respectively), so deforming and
/// transforming commute.
pub fn transform_cloud(cloud: &GaussianCloud, transform: &Se3Pose) -> GaussianCloud {
    if *transform == Se3Pose::identity() {
        return cloud.clone();
    }
    let q = rotation_to_quat(&transform.rotation);
    let mut out = cloud.clone();
    for p in &mut out.positions {
        *p = transform.transform_point(p);
    }
    for r in &mut out.rotations {
        *r = quat_mul(&q, r).normalize();
    }
    out.deformation.rotate_weights(&transform.rotation, &q);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose::{se3_exp, TangentVector};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, LN_2};

    fn z_quarter_turn() -> Vector4<f64> {
        let h = FRAC_PI_2 / 2.0;
        Vector4::new(h.cos(), 0.0, 0.0, h.sin())
    }

    #[test]
    fn covariance_examples() {
        let c = build_covariance(&Vector3::zeros(), &identity_quat()).unwrap();
        assert_abs_diff_eq!(c, Matrix3::identity(), epsilon = 1e-15);

        let c = build_covariance(&Vector3::new(LN_2, 0.0, 0.0), &z_quarter_turn()).unwrap();
        assert_abs_diff_eq!(c, Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0)), epsilon = 1e-12);

        let c2 = build_covariance(&Vector3::zeros(), &Vector4::new(2.0, 0.0, 0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(c2, Matrix3::identity(), epsilon = 1e-15);

        assert!(build_covariance(&Vector3::new(f64::NAN, 0.0, 0.0), &identity_quat()).is_err());
        assert!(build_covariance(&Vector3::zeros(), &Vector4::new(f64::INFINITY, 0.0, 0.0, 0.0)).is_err());
    }

    #[test]
    fn sh_examples() {
        assert_eq!(sh_to_color(&Vector3::zeros()), Vector3::repeat(0.5));
        assert_eq!(color_to_sh(&Vector3::repeat(0.5)), Vector3::zeros());
        let top = color_to_sh(&Vector3::repeat(1.0));
        assert_abs_diff_eq!(top.x, 1.7724539, epsilon = 1e-7);
        assert_eq!(sh_to_color(&Vector3::repeat(100.0)), Vector3::repeat(1.0));
    }

    #[test]
    fn intrinsics_validation() {
        assert!(CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).is_ok());
        assert!(CameraIntrinsics::new(0.0, 100.0, 50.0, 50.0, 100, 100).is_err());
        assert!(CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 0, 100).is_err());
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap();
        assert!(k.with_near(10.0).is_err());
        assert!(k.with_near(0.0).is_err());
    }

    fn sample_cloud() -> GaussianCloud {
        let mut g = GaussianCloud::with_deformation(DeformationParams::new(0, 4, 1.0).unwrap());
        g.push(Vector3::new(1.0, 0.0, 0.0), Vector3::new(-1.0, -2.0, -3.0), identity_quat(), Vector3::new(0.1, 0.2, 0.3), 0.5);
        g.push(Vector3::new(0.2, -0.4, 2.0), Vector3::new(-2.0, -2.0, -2.5), Vector4::new(0.9, 0.1, -0.3, 0.2), Vector3::zeros(), -1.0);
        g.deformation.weights_mut(1, 2)[0] = 0.05;
        g.deformation.weights_mut(1, 2)[4] = 0.01;
        g
    }

    #[test]
    fn transform_identity_and_translation() {
        let g = sample_cloud();
        assert_eq!(transform_cloud(&g, &Se3Pose::identity()), g);

        let t = Se3Pose::from_translation(Vector3::new(1.0, 2.0, 3.0));
        let moved = transform_cloud(&g, &t);
        for i in 0..g.len() {
            assert_abs_diff_eq!(moved.positions[i], g.positions[i] + Vector3::new(1.0, 2.0, 3.0), epsilon = 1e-15);
            assert_abs_diff_eq!(moved.rotations[i], g.rotations[i], epsilon = 1e-15);
        }
        assert_eq!(moved.log_scales, g.log_scales);
        assert_eq!(moved.sh_colors, g.sh_colors);
        assert_eq!(moved.logit_opacities, g.logit_opacities);
    }

    #[test]
    fn transform_quarter_turn() {
        let g = sample_cloud();
        let t = se3_exp(&TangentVector::new(0.0, 0.0, 0.0, 0.0, 0.0, FRAC_PI_2));
        let moved = transform_cloud(&g, &t);
        assert_abs_diff_eq!(moved.positions[0], Vector3::new(0.0, 1.0, 0.0), epsilon = 1e-15);
        // identity ⊗ q(z, 90°) = q(z, 90°)
        assert_abs_diff_eq!(moved.rotations[0], z_quarter_turn(), epsilon = 1e-15);
        let r_expected = quat_to_rotation(&z_quarter_turn()) * quat_to_rotation(&g.rotations[1]);
        assert_abs_diff_eq!(quat_to_rotation(&moved.rotations[1]), r_expected, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn transform_roundtrip(rho in prop::array::uniform3(-2.0..2.0f64), phi in prop::array::uniform3(-1.5..1.5f64)) {
            let g = sample_cloud();
            let t = se3_exp(&TangentVector::new(rho[0], rho[1], rho[2], phi[0], phi[1], phi[2]));
            let back = transform_cloud(&transform_cloud(&g, &t), &t.inverse());
            for i in 0..g.len() {
                prop_assert!((back.positions[i] - g.positions[i]).abs().max() < 1e-9);
                prop_assert!((back.rotations[i] - g.rotations[i]).abs().max() < 1e-9);
            }
            let d = back.deformation.as_slice().iter().zip(g.deformation.as_slice()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            prop_assert!(d < 1e-9);
        }

        #[test]
        fn covariance_is_psd(s in prop::array::uniform3(-5.0..2.0f64), q in prop::array::uniform4(-1.0..1.0f64)) {
            prop_assume!(Vector4::from(q).norm() > 1e-3);
            let c = build_covariance(&Vector3::from(s), &Vector4::from(q)).unwrap();
            prop_assert!((c - c.transpose()).abs().max() <= 1e-12);
            let shifted = c + Matrix3::identity() * 1e-12;
            prop_assert!(shifted.cholesky().is_some());
        }

        #[test]
        fn sh_roundtrip(c in prop::array::uniform3(1e-6..(1.0 - 1e-6f64))) {
            let rgb = Vector3::from(c);
            let back = sh_to_color(&color_to_sh(&rgb));
            prop_assert!((back - rgb).abs().max() <= 1e-12);
        }
    }
}
