//! Differentiable Gaussian rasterizer.
//!
//! Gaussians are projected with the pinhole Jacobian, sorted front to back
//! (ties broken by source index) and alpha-blended per pixel. Each blended
//! term is `min(α·G, 0.99)` where `G` is the unnormalized 2D Gaussian,
//! evaluated only inside Mahalanobis radius 3. Color, depth and accumulated
//! opacity share the same blending weights; depth is not normalized by the
//! accumulated opacity.
//!
//! [`render`] bins Gaussians into 16×16 tiles; [`render_reference`] loops
//! over every Gaussian for every pixel. Both accumulate in the same order,
//! so they agree to rounding.

mod backward;
mod forward;

pub use backward::{render_backward, RenderGradients, RenderUpstream};
pub use forward::{blend_structure, render, render_reference, RenderOutput};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::pose::Se3Pose;
use crate::scene::{quat_to_rotation, sh_to_color, sigmoid, CameraIntrinsics, GaussianCloud};

/// Isotropic screen-space blur added to every projected covariance (px²).
pub const LOW_PASS: f64 = 0.3;
/// Squared Mahalanobis cutoff.
pub const CUTOFF_SQ: f64 = 9.0;
/// Upper bound on a single blended term.
pub const MAX_TERM_ALPHA: f64 = 0.99;
pub const TILE_SIZE: usize = 16;

/// Screen-space footprint of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    pub cam_depth: f64,
    pub cam_position: Vector3<f64>,
    pub jacobian: Matrix2x3<f64>,
}

/// Projects a world-space Gaussian; `None` when it lies at or in front of the
/// near plane.
pub fn project_gaussian(
    mean: &Vector3<f64>,
    cov: &Matrix3<f64>,
    pose: &Se3Pose,
    k: &CameraIntrinsics,
) -> Option<Projection> {
    let pc = pose.transform_point(mean);
    if !(pc.z > k.near) {
        return None;
    }
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let iz = 1.0 / z;
    let jacobian = Matrix2x3::new(
        k.fx * iz,
        0.0,
        -k.fx * x * iz * iz,
        0.0,
        k.fy * iz,
        -k.fy * y * iz * iz,
    );
    let w = &pose.rotation;
    let cam_cov = w * cov * w.transpose();
    let mut cov2d = jacobian * cam_cov * jacobian.transpose();
    cov2d[(0, 1)] = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(1, 0)] = cov2d[(0, 1)];
    cov2d += Matrix2::identity() * LOW_PASS;
    Some(Projection {
        mean2d: Vector2::new(k.fx * x * iz + k.cx, k.fy * y * iz + k.cy),
        cov2d,
        cam_depth: z,
        cam_position: pc,
        jacobian,
    })
}

/// A projected Gaussian ready for blending.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedGaussian {
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`, stored as `(a, b, c)` for `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    pub cam_depth: f64,
    pub color: Vector3<f64>,
    pub alpha: f64,
    pub source_index: usize,
    /// Half-extent of the axis-aligned box enclosing the 3σ ellipse.
    pub radius: f64,
}

impl ProjectedGaussian {
    /// Blending term at pixel `(px, py)`: `(min(α·G, 0.99), G)` or `None`
    /// outside the cutoff.
    #[inline]
    pub fn term(&self, px: f64, py: f64) -> Option<(f64, f64)> {
        let dx = px - self.mean2d.x;
        let dy = py - self.mean2d.y;
        let [a, b, c] = self.conic;
        let m2 = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        if m2 > CUTOFF_SQ {
            return None;
        }
        let g = (-0.5 * m2).exp();
        Some(((self.alpha * g).min(MAX_TERM_ALPHA), g))
    }

    fn overlaps_image(&self, k: &CameraIntrinsics) -> bool {
        let (mx, my, r) = (self.mean2d.x, self.mean2d.y, self.radius);
        mx + r >= 0.0
            && my + r >= 0.0
            && mx - r <= (k.width - 1) as f64
            && my - r <= (k.height - 1) as f64
    }
}

fn bounding_radius(cov2d: &Matrix2<f64>) -> f64 {
    let (a, b, c) = (cov2d[(0, 0)], cov2d[(0, 1)], cov2d[(1, 1)]);
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    // Slightly inflated so boundary rounding can never drop a pixel the
    // reference path would shade.
    3.0 * lambda_max.sqrt() * (1.0 + 1e-9) + 1e-9
}

/// Projected, visible Gaussians in blending order, plus their projections
/// (indexed like the cloud) for the backward pass.
pub(crate) struct Prepared {
    pub sorted: Vec<ProjectedGaussian>,
    pub projections: Vec<Option<Projection>>,
}

pub(crate) fn prepare(cloud: &GaussianCloud, pose: &Se3Pose, k: &CameraIntrinsics) -> Prepared {
    let n = cloud.len();
    let mut projections = Vec::with_capacity(n);
    let mut sorted = Vec::with_capacity(n);
    for i in 0..n {
        let r = quat_to_rotation(&cloud.rotations[i]);
        let cov = crate::scene::covariance_unchecked(&cloud.log_scales[i], &r);
        let proj = project_gaussian(&cloud.positions[i], &cov, pose, k);
        if let Some(p) = &proj {
            let inv = p.cov2d.try_inverse().unwrap_or_else(Matrix2::zeros);
            let g = ProjectedGaussian {
                mean2d: p.mean2d,
                cov2d: p.cov2d,
                conic: [inv[(0, 0)], 0.5 * (inv[(0, 1)] + inv[(1, 0)]), inv[(1, 1)]],
                cam_depth: p.cam_depth,
                color: sh_to_color(&cloud.sh_colors[i]),
                alpha: sigmoid(cloud.logit_opacities[i]),
                source_index: i,
                radius: bounding_radius(&p.cov2d),
            };
            if g.overlaps_image(k) {
                sorted.push(g);
            }
        }
        projections.push(proj);
    }
    sorted.sort_by(|a, b| {
        a.cam_depth
            .total_cmp(&b.cam_depth)
            .then(a.source_index.cmp(&b.source_index))
    });
    Prepared {
        sorted,
        projections,
    }
}

/// Per-tile lists of indices into `Prepared::sorted`, in blending order.
pub(crate) struct TileBins {
    pub tiles_x: usize,
    pub lists: Vec<Vec<u32>>,
}

pub(crate) fn bin_tiles(sorted: &[ProjectedGaussian], k: &CameraIntrinsics) -> TileBins {
    let tiles_x = k.width.div_ceil(TILE_SIZE);
    let tiles_y = k.height.div_ceil(TILE_SIZE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    let ts = TILE_SIZE as f64;
    for (idx, g) in sorted.iter().enumerate() {
        let x0 = ((g.mean2d.x - g.radius) / ts).floor().max(0.0) as usize;
        let y0 = ((g.mean2d.y - g.radius) / ts).floor().max(0.0) as usize;
        let x1 = (((g.mean2d.x + g.radius) / ts).floor() as isize).min(tiles_x as isize - 1);
        let y1 = (((g.mean2d.y + g.radius) / ts).floor() as isize).min(tiles_y as isize - 1);
        if x1 < 0 || y1 < 0 {
            continue;
        }
        for ty in y0..=(y1 as usize) {
            for tx in x0..=(x1 as usize) {
                lists[ty * tiles_x + tx].push(idx as u32);
            }
        }
    }
    TileBins { tiles_x, lists }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn projection_examples() {
        let k = k100();
        let id = Se3Pose::identity();
        let p = project_gaussian(&Vector3::new(0.0, 0.0, 1.0), &Matrix3::identity(), &id, &k).unwrap();
        assert_eq!(p.mean2d, Vector2::new(50.0, 50.0));
        assert_eq!(p.cam_depth, 1.0);
        assert_abs_diff_eq!(p.cov2d, Matrix2::new(10000.3, 0.0, 0.0, 10000.3), epsilon = 1e-9);

        let p = project_gaussian(&Vector3::new(0.1, 0.0, 1.0), &Matrix3::identity(), &id, &k).unwrap();
        assert_abs_diff_eq!(p.mean2d, Vector2::new(60.0, 50.0), epsilon = 1e-12);
    }

    #[test]
    fn projection_culls_near_plane() {
        let k = k100();
        let id = Se3Pose::identity();
        assert!(project_gaussian(&Vector3::new(0.0, 0.0, k.near), &Matrix3::identity(), &id, &k).is_none());
        assert!(project_gaussian(&Vector3::new(0.0, 0.0, -1.0), &Matrix3::identity(), &id, &k).is_none());
    }
}
