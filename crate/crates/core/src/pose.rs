//! Rigid camera poses, SE(3) exponential/logarithm maps and the
//! constant-velocity pose predictor.
//!
//! Poses are world-to-camera. Tangent vectors are `(ρ, φ)`: translation part
//! first, then axis-angle rotation. Perturbations are applied on the left,
//! `T ← exp(ξ)·T`, matching the pose gradients produced by the rasterizer.

use std::collections::VecDeque;
use std::ops::Mul;

use nalgebra::{Matrix3, Matrix4, Quaternion, Vector3, Vector6};

use crate::error::{Error, Result};

/// 6-vector `(ρ, φ)` in the tangent space of SE(3).
pub type TangentVector = Vector6<f64>;

const SMALL_ANGLE: f64 = 1e-8;
/// Below this angle the series for the cancellation-prone coefficients is
/// exact to double precision.
const SERIES_ANGLE: f64 = 1e-3;

/// Rotation angles closer than this to π are rejected by [`se3_log`].
pub const LOG_ANGLE_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Se3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Se3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose, projecting `rotation` onto SO(3).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: orthonormalize(&rotation),
            translation,
        }
    }

    /// Builds a pose without touching `rotation`, failing if it is not a
    /// proper rotation within 1e-9.
    pub fn try_new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self {
            rotation,
            translation,
        };
        if !pose.is_valid(1e-9) {
            return Err(Error::invalid("rotation is not orthonormal with det +1"));
        }
        Ok(pose)
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: t,
        }
    }

    pub fn from_quaternion(q: &Quaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: quat_to_matrix(q),
            translation,
        }
    }

    pub fn is_valid(&self, tol: f64) -> bool {
        let r = &self.rotation;
        let t_ok = self.translation.iter().all(|v| v.is_finite());
        let orth = (r.transpose() * r - Matrix3::identity()).abs().max() <= tol;
        t_ok && orth && (r.determinant() - 1.0).abs() <= tol
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    /// Reads the upper 3×4 block of a homogeneous matrix; the rotation is
    /// re-orthonormalized.
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        let r: Matrix3<f64> = m.fixed_view::<3, 3>(0, 0).into();
        let t: Vector3<f64> = m.fixed_view::<3, 1>(0, 3).into();
        Self::new(r, t)
    }

    /// Row-major 4×4.
    pub fn to_row_major(&self) -> [f64; 16] {
        let m = self.to_matrix();
        let mut out = [0.0; 16];
        for r in 0..4 {
            for c in 0..4 {
                out[r * 4 + c] = m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 16 || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("pose needs 16 finite numbers"));
        }
        let m = Matrix4::from_row_slice(values);
        Ok(Self::from_matrix(&m))
    }

    /// Rotation as a unit quaternion with non-negative scalar part.
    pub fn quaternion(&self) -> Quaternion<f64> {
        matrix_to_quat(&self.rotation)
    }

    /// Rotation angle in radians.
    pub fn angle(&self) -> f64 {
        rotation_angle(&self.rotation)
    }
}

impl Mul for Se3Pose {
    type Output = Se3Pose;

    fn mul(self, rhs: Se3Pose) -> Se3Pose {
        Se3Pose {
            rotation: self.rotation * rhs.rotation,
            translation: self.rotation * rhs.translation + self.translation,
        }
    }
}

impl Mul<&Se3Pose> for &Se3Pose {
    type Output = Se3Pose;

    fn mul(self, rhs: &Se3Pose) -> Se3Pose {
        *self * *rhs
    }
}

#[inline]
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

#[inline]
fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let s = 0.5 * vee(&(r - r.transpose())).norm();
    let c = 0.5 * (r.trace() - 1.0);
    s.atan2(c)
}

/// Rotation matrix of a (not necessarily normalized) quaternion `w + xi + yj + zk`.
pub fn quat_to_matrix(q: &Quaternion<f64>) -> Matrix3<f64> {
    let n = q.norm();
    let (w, x, y, z) = (q.w / n, q.i / n, q.j / n, q.k / n);
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Shepperd's method; returns a unit quaternion with `w >= 0`.
pub fn matrix_to_quat(r: &Matrix3<f64>) -> Quaternion<f64> {
    let tr = r.trace();
    let q = if tr > r[(0, 0)] && tr > r[(1, 1)] && tr > r[(2, 2)] {
        let s = (1.0 + tr).sqrt() * 2.0;
        Quaternion::new(
            0.25 * s,
            (r[(2, 1)] - r[(1, 2)]) / s,
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(1, 0)] - r[(0, 1)]) / s,
        )
    } else if r[(0, 0)] > r[(1, 1)] && r[(0, 0)] > r[(2, 2)] {
        let s = (1.0 + r[(0, 0)] - r[(1, 1)] - r[(2, 2)]).sqrt() * 2.0;
        Quaternion::new(
            (r[(2, 1)] - r[(1, 2)]) / s,
            0.25 * s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
        )
    } else if r[(1, 1)] > r[(2, 2)] {
        let s = (1.0 + r[(1, 1)] - r[(0, 0)] - r[(2, 2)]).sqrt() * 2.0;
        Quaternion::new(
            (r[(0, 2)] - r[(2, 0)]) / s,
            (r[(0, 1)] + r[(1, 0)]) / s,
            0.25 * s,
            (r[(1, 2)] + r[(2, 1)]) / s,
        )
    } else {
        let s = (1.0 + r[(2, 2)] - r[(0, 0)] - r[(1, 1)]).sqrt() * 2.0;
        Quaternion::new(
            (r[(1, 0)] - r[(0, 1)]) / s,
            (r[(0, 2)] + r[(2, 0)]) / s,
            (r[(1, 2)] + r[(2, 1)]) / s,
            0.25 * s,
        )
    };
    let q = q / q.norm();
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

/// Nearest rotation (via the quaternion of the matrix).
pub fn orthonormalize(r: &Matrix3<f64>) -> Matrix3<f64> {
    quat_to_matrix(&matrix_to_quat(r))
}

/// Coefficients (A, B, C) of the SO(3)/SE(3) exponential:
/// `A = sinθ/θ`, `B = (1-cosθ)/θ²`, `C = (θ-sinθ)/θ³`.
fn exp_coefficients(theta: f64) -> (f64, f64, f64) {
    let t2 = theta * theta;
    let t4 = t2 * t2;
    if theta < SMALL_ANGLE {
        return (
            1.0 - t2 / 6.0 + t4 / 120.0,
            0.5 - t2 / 24.0 + t4 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0,
        );
    }
    let half = (0.5 * theta).sin();
    // 1 - cos θ = 2 sin²(θ/2) avoids cancellation for small angles.
    let b = 2.0 * half * half / t2;
    // θ - sin θ cancels catastrophically well above SMALL_ANGLE.
    let c = if theta < SERIES_ANGLE {
        1.0 / 6.0 - t2 / 120.0 + t4 / 5040.0
    } else {
        (theta - theta.sin()) / (t2 * theta)
    };
    (theta.sin() / theta, b, c)
}

pub fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let (a, b, _) = exp_coefficients(phi.norm());
    let k = hat(phi);
    Matrix3::identity() + k * a + k * k * b
}

pub fn se3_exp(xi: &TangentVector) -> Se3Pose {
    let rho = Vector3::new(xi[0], xi[1], xi[2]);
    let phi = Vector3::new(xi[3], xi[4], xi[5]);
    let (a, b, c) = exp_coefficients(phi.norm());
    let k = hat(&phi);
    let k2 = k * k;
    let rotation = Matrix3::identity() + k * a + k2 * b;
    let v = Matrix3::identity() + k * b + k2 * c;
    Se3Pose {
        rotation,
        translation: v * rho,
    }
}

/// Inverse of [`se3_exp`] for rotation angles below `π - 1e-6`.
pub fn se3_log(pose: &Se3Pose) -> Result<TangentVector> {
    let r = &pose.rotation;
    let w = vee(&(r - r.transpose()));
    let theta = (0.5 * w.norm()).atan2(0.5 * (r.trace() - 1.0));
    if theta > std::f64::consts::PI - LOG_ANGLE_MARGIN {
        return Err(Error::NumericallyUnstable(format!(
            "rotation angle {theta} too close to pi for the SE(3) logarithm"
        )));
    }
    // φ = θ / (2 sinθ) · vee(R - Rᵀ)
    let t2 = theta * theta;
    let scale = if theta < SMALL_ANGLE {
        0.5 * (1.0 + t2 / 6.0 + 7.0 * t2 * t2 / 360.0)
    } else {
        theta / (2.0 * theta.sin())
    };
    // (1 - A/(2B)) / θ²
    let d = if theta < SERIES_ANGLE {
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        let (a, b, _) = exp_coefficients(theta);
        (1.0 - a / (2.0 * b)) / t2
    };
    let phi = w * scale;
    let k = hat(&phi);
    let v_inv = Matrix3::identity() - k * 0.5 + k * k * d;
    let rho = v_inv * pose.translation;
    Ok(TangentVector::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z))
}

/// `exp(step)·T`, re-orthonormalized.
pub fn apply_pose_update(pose: &Se3Pose, step: &TangentVector) -> Se3Pose {
    let updated = se3_exp(step) * *pose;
    Se3Pose::new(updated.rotation, updated.translation)
}

/// Bounded history of estimated poses with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseHistory {
    capacity: usize,
    entries: VecDeque<(f64, Se3Pose)>,
}

impl PoseHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            entries: VecDeque::with_capacity(capacity.max(1)),
        }
    }

    /// History sized for a velocity window of `window` frames (capacity `2·window`).
    pub fn for_window(window: usize) -> Self {
        Self::new(2 * window.max(1))
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn push(&mut self, timestamp: f64, pose: Se3Pose) -> Result<()> {
        if let Some(&(last, _)) = self.entries.back() {
            if timestamp.partial_cmp(&last) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::invalid(format!(
                    "pose history timestamps must increase ({timestamp} after {last})"
                )));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back((timestamp, pose));
        Ok(())
    }

    pub fn latest(&self) -> Option<&Se3Pose> {
        self.entries.back().map(|(_, p)| p)
    }

    /// `back(1)` is the most recent pose, `back(2)` the one before it.
    pub fn back(&self, l: usize) -> Option<&Se3Pose> {
        let n = self.entries.len();
        (l >= 1 && l <= n).then(|| &self.entries[n - l].1)
    }

    pub fn iter(&self) -> impl Iterator<Item = &(f64, Se3Pose)> {
        self.entries.iter()
    }
}

/// Constant-velocity prediction of the next pose.
///
/// The velocity is the average relative increment over a window of `window`
/// frames, `exp(Σ_l log(T_{i-l}·T_{i-L-l}⁻¹) / L²)`, and it is composed on the
/// left of the latest pose. With fewer than `2L` poses the latest pose is
/// returned unchanged (identity for an empty history). A non-finite or
/// unstable increment also falls back to the latest pose.
pub fn extrapolate_pose(history: &PoseHistory, window: usize) -> Se3Pose {
    let Some(latest) = history.latest() else {
        return Se3Pose::identity();
    };
    if window == 0 || history.len() < 2 * window {
        return *latest;
    }
    let mut sum = TangentVector::zeros();
    for l in 1..=window {
        let (Some(recent), Some(older)) = (history.back(l), history.back(window + l)) else {
            return *latest;
        };
        match se3_log(&(*recent * older.inverse())) {
            Ok(xi) => sum += xi,
            Err(_) => return *latest,
        }
    }
    let velocity = se3_exp(&(sum / (window * window) as f64));
    let predicted = velocity * *latest;
    Se3Pose::new(predicted.rotation, predicted.translation)
}
