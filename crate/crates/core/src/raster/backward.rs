use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3, Vector4, Vector6};
use rayon::prelude::*;

use super::{bin_tiles, prepare, MAX_TERM_ALPHA, TILE_SIZE};
use crate::buffer::{check_dims, ColorImage, ScalarImage};
use crate::error::{Error, Result};
use crate::pose::Se3Pose;
use crate::scene::{quat_to_rotation, sigmoid, CameraIntrinsics, GaussianCloud, GaussianGradients, SH_C0};

/// Gradients of a scalar loss with respect to the rendered maps.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderUpstream {
    pub color: ColorImage,
    pub depth: ScalarImage,
    /// Optional gradient on the accumulated-opacity map.
    pub alpha: Option<ScalarImage>,
}

impl RenderUpstream {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: ColorImage::zeros(width, height),
            depth: ScalarImage::zeros(width, height),
            alpha: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub gaussians: GaussianGradients,
    /// Left-perturbation tangent gradient `(∂/∂ρ, ∂/∂φ)`.
    pub pose: Vector6<f64>,
}

/// Screen-space gradient of one Gaussian accumulated over pixels.
#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean2d: Vector2<f64>,
    /// ∂L/∂conic for the entries (0,0), (0,1) [= (1,0)], (1,1) of the full matrix.
    conic: [f64; 3],
    alpha: f64,
    color: Vector3<f64>,
    depth: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        self.mean2d += o.mean2d;
        for i in 0..3 {
            self.conic[i] += o.conic[i];
        }
        self.alpha += o.alpha;
        self.color += o.color;
        self.depth += o.depth;
    }
}

struct Contribution {
    local: usize,
    a: f64,
    g: f64,
    transmittance: f64,
    clamped: bool,
}

/// Analytic gradients of the loss implied by `upstream` with respect to every
/// Gaussian attribute and the camera pose. Replays the forward sort order.
pub fn render_backward(
    cloud: &GaussianCloud,
    pose: &Se3Pose,
    k: &CameraIntrinsics,
    upstream: &RenderUpstream,
) -> Result<RenderGradients> {
    check_dims("upstream color", upstream.color.width, upstream.color.height, k.width, k.height)?;
    check_dims("upstream depth", upstream.depth.width, upstream.depth.height, k.width, k.height)?;
    if let Some(a) = &upstream.alpha {
        check_dims("upstream alpha", a.width, a.height, k.width, k.height)?;
    }
    if cloud.log_scales.len() != cloud.len()
        || cloud.rotations.len() != cloud.len()
        || cloud.sh_colors.len() != cloud.len()
        || cloud.logit_opacities.len() != cloud.len()
    {
        return Err(Error::invalid("cloud attribute arrays differ in length"));
    }

    let n = cloud.len();
    let prepared = prepare(cloud, pose, k);
    let bins = bin_tiles(&prepared.sorted, k);
    let sorted = &prepared.sorted;

    // Per-tile partial gradients, indexed like the tile's list.
    let partials: Vec<Vec<SplatGrad>> = bins
        .lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut grads = vec![SplatGrad::default(); list.len()];
            if list.is_empty() {
                return grads;
            }
            let (tx, ty) = (tile % bins.tiles_x, tile / bins.tiles_x);
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let mut contribs: Vec<Contribution> = Vec::with_capacity(list.len());
            for y in y0..(y0 + TILE_SIZE).min(k.height) {
                for x in x0..(x0 + TILE_SIZE).min(k.width) {
                    let idx = y * k.width + x;
                    let gc = upstream.color.data[idx];
                    let gd = upstream.depth.data[idx];
                    let ga = upstream.alpha.as_ref().map_or(0.0, |a| a.data[idx]);
                    if gc == Vector3::zeros() && gd == 0.0 && ga == 0.0 {
                        continue;
                    }
                    let (px, py) = (x as f64, y as f64);
                    contribs.clear();
                    let mut transmittance = 1.0;
                    for (local, &si) in list.iter().enumerate() {
                        let sg = &sorted[si as usize];
                        if let Some((a, g)) = sg.term(px, py) {
                            contribs.push(Contribution {
                                local,
                                a,
                                g,
                                transmittance,
                                clamped: sg.alpha * g > MAX_TERM_ALPHA,
                            });
                            transmittance *= 1.0 - a;
                        }
                    }
                    // Back to front: `suffix` = Σ_{later} a·T·(f·g).
                    let mut suffix = 0.0;
                    for c in contribs.iter().rev() {
                        let sg = &sorted[list[c.local] as usize];
                        let feature_dot = sg.color.dot(&gc) + sg.cam_depth * gd + ga;
                        let weight = c.a * c.transmittance;
                        let d_a = c.transmittance * feature_dot - suffix / (1.0 - c.a);
                        suffix += weight * feature_dot;

                        let out = &mut grads[c.local];
                        out.color += gc * weight;
                        out.depth += gd * weight;
                        if c.clamped {
                            continue;
                        }
                        out.alpha += c.g * d_a;
                        let d_g = sg.alpha * d_a;
                        // G = exp(-m²/2), m² = dᵀ Q d with d = pixel - mean.
                        let d_m2 = -0.5 * c.g * d_g;
                        let dx = px - sg.mean2d.x;
                        let dy = py - sg.mean2d.y;
                        let [qa, qb, qc] = sg.conic;
                        out.conic[0] += d_m2 * dx * dx;
                        out.conic[1] += d_m2 * dx * dy;
                        out.conic[2] += d_m2 * dy * dy;
                        // ∂m²/∂mean = -2 Q d
                        out.mean2d.x -= 2.0 * d_m2 * (qa * dx + qb * dy);
                        out.mean2d.y -= 2.0 * d_m2 * (qb * dx + qc * dy);
                    }
                }
            }
            grads
        })
        .collect();

    // Deterministic reduction: tiles in order, entries in list order.
    let mut screen = vec![SplatGrad::default(); sorted.len()];
    for (list, part) in bins.lists.iter().zip(&partials) {
        for (&si, g) in list.iter().zip(part) {
            screen[si as usize].add(g);
        }
    }

    let mut out = GaussianGradients::zeros(n);
    let mut pose_grad = Vector6::zeros();
    let w = &pose.rotation;
    for (sg, sgrad) in sorted.iter().zip(&screen) {
        let i = sg.source_index;
        let proj = prepared.projections[i].as_ref().expect("sorted gaussians are projected");
        let pg = project_backward(cloud, i, proj, sg.conic, sgrad, w, k);

        out.positions[i] = pg.world_position;
        out.log_scales[i] = pg.log_scale;
        out.rotations[i] = pg.rotation;
        let color_raw = Vector3::repeat(0.5) + cloud.sh_colors[i] * SH_C0;
        out.sh_colors[i] = Vector3::from_fn(|c, _| {
            if color_raw[c] > 0.0 && color_raw[c] < 1.0 {
                SH_C0 * sgrad.color[c]
            } else {
                0.0
            }
        });
        let alpha = sigmoid(cloud.logit_opacities[i]);
        out.logit_opacities[i] = sgrad.alpha * alpha * (1.0 - alpha);

        let pc = proj.cam_position;
        let gp = pg.cam_position;
        pose_grad[0] += gp.x;
        pose_grad[1] += gp.y;
        pose_grad[2] += gp.z;
        let rot = pc.cross(&gp) + pg.rotation_from_covariance;
        pose_grad[3] += rot.x;
        pose_grad[4] += rot.y;
        pose_grad[5] += rot.z;
    }

    Ok(RenderGradients {
        gaussians: out,
        pose: pose_grad,
    })
}

struct ProjectBackward {
    cam_position: Vector3<f64>,
    world_position: Vector3<f64>,
    log_scale: Vector3<f64>,
    rotation: Vector4<f64>,
    /// Rotation tangent gradient through `W` in the projected covariance.
    rotation_from_covariance: Vector3<f64>,
}

fn project_backward(
    cloud: &GaussianCloud,
    i: usize,
    proj: &super::Projection,
    conic: [f64; 3],
    sg: &SplatGrad,
    w: &Matrix3<f64>,
    k: &CameraIntrinsics,
) -> ProjectBackward {
    let q = Matrix2::new(conic[0], conic[1], conic[1], conic[2]);
    let d_q = Matrix2::new(sg.conic[0], sg.conic[1], sg.conic[1], sg.conic[2]);
    // Q = C⁻¹ ⇒ ∂L/∂C = -Q (∂L/∂Q) Q
    let d_cov2d = -(q * d_q * q);

    let r = quat_to_rotation(&cloud.rotations[i]);
    let scale = cloud.log_scales[i].map(f64::exp);
    let m = Matrix3::from_columns(&[r.column(0) * scale.x, r.column(1) * scale.y, r.column(2) * scale.z]);
    let cov = m * m.transpose();
    let cam_cov = w * cov * w.transpose();
    let j: &Matrix2x3<f64> = &proj.jacobian;

    // C = J Wc Jᵀ + λI
    let d_j: Matrix2x3<f64> = d_cov2d * j * cam_cov * 2.0;
    let d_cam_cov: Matrix3<f64> = j.transpose() * d_cov2d * j;
    // Wc = W Σ Wᵀ
    let d_cov = w.transpose() * d_cam_cov * w;
    let d_w = d_cam_cov * w * cov * 2.0;

    let pc = proj.cam_position;
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let iz3 = iz2 * iz;
    let mut g_pc = Vector3::zeros();
    // Jacobian entries depend on the camera-space mean.
    g_pc.x += d_j[(0, 2)] * (-k.fx * iz2);
    g_pc.y += d_j[(1, 2)] * (-k.fy * iz2);
    g_pc.z += d_j[(0, 0)] * (-k.fx * iz2)
        + d_j[(0, 2)] * (2.0 * k.fx * x * iz3)
        + d_j[(1, 1)] * (-k.fy * iz2)
        + d_j[(1, 2)] * (2.0 * k.fy * y * iz3);
    // 2D mean
    let gm = sg.mean2d;
    g_pc.x += gm.x * k.fx * iz;
    g_pc.y += gm.y * k.fy * iz;
    g_pc.z -= gm.x * k.fx * x * iz2 + gm.y * k.fy * y * iz2;
    // depth feature
    g_pc.z += sg.depth;

    // ⟨∂L/∂W, [e_i]ₓ W⟩ = ⟨∂L/∂W Wᵀ, [e_i]ₓ⟩
    let mw = d_w * w.transpose();
    let rotation_from_covariance = Vector3::new(
        mw[(2, 1)] - mw[(1, 2)],
        mw[(0, 2)] - mw[(2, 0)],
        mw[(1, 0)] - mw[(0, 1)],
    );

    // Σ = M Mᵀ with M = R S
    let d_m = d_cov * m * 2.0;
    let rt_dm = r.transpose() * d_m;
    let log_scale = Vector3::new(
        rt_dm[(0, 0)] * scale.x,
        rt_dm[(1, 1)] * scale.y,
        rt_dm[(2, 2)] * scale.z,
    );
    let d_r = Matrix3::from_columns(&[d_m.column(0) * scale.x, d_m.column(1) * scale.y, d_m.column(2) * scale.z]);
    let rotation = quat_backward(&cloud.rotations[i], &d_r);

    ProjectBackward {
        cam_position: g_pc,
        world_position: w.transpose() * g_pc,
        log_scale,
        rotation,
        rotation_from_covariance,
    }
}

/// ∂L/∂q for `R(q/|q|)` given ∂L/∂R.
fn quat_backward(q: &Vector4<f64>, d_r: &Matrix3<f64>) -> Vector4<f64> {
    let norm = q.norm();
    let u = q / norm;
    let (w, x, y, z) = (u[0], u[1], u[2], u[3]);
    let dw = Matrix3::new(0.0, -z, y, z, 0.0, -x, -y, x, 0.0) * 2.0;
    let dx = Matrix3::new(0.0, y, z, y, -2.0 * x, -w, z, w, -2.0 * x) * 2.0;
    let dy = Matrix3::new(-2.0 * y, x, w, x, 0.0, z, -w, z, -2.0 * y) * 2.0;
    let dz = Matrix3::new(-2.0 * z, -w, x, w, -2.0 * z, y, x, y, 0.0) * 2.0;
    let g = Vector4::new(
        d_r.component_mul(&dw).sum(),
        d_r.component_mul(&dx).sum(),
        d_r.component_mul(&dy).sum(),
        d_r.component_mul(&dz).sum(),
    );
    (g - u * u.dot(&g)) / norm
}

#[cfg(test)]
mod tests {
    use super::super::render;
    use super::*;
    use crate::pose::{apply_pose_update, se3_exp, TangentVector};
    use crate::testutil::random_cloud;
    use rand::{Rng, SeedableRng};

    /// L = Σ uc·color + ud·depth + ua·alpha for fixed random maps.
    fn linear_loss(cloud: &GaussianCloud, pose: &Se3Pose, k: &CameraIntrinsics, up: &RenderUpstream) -> f64 {
        let out = render(cloud, pose, k);
        let mut l = 0.0;
        for i in 0..out.color.len() {
            l += out.color.data[i].dot(&up.color.data[i]) + out.depth.data[i] * up.depth.data[i];
            if let Some(a) = &up.alpha {
                l += out.alpha.data[i] * a.data[i];
            }
        }
        l
    }

    fn random_upstream(rng: &mut impl Rng, k: &CameraIntrinsics) -> RenderUpstream {
        let n = k.width * k.height;
        let mut scalar = || ScalarImage {
            width: k.width,
            height: k.height,
            data: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let depth = scalar();
        let alpha = scalar();
        let mut color = ColorImage::zeros(k.width, k.height);
        for v in &mut color.data {
            *v = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        }
        RenderUpstream { color, depth, alpha: Some(alpha) }
    }

    fn close(analytic: f64, fd: f64) -> bool {
        (analytic - fd).abs() <= 1e-3 * analytic.abs().max(fd.abs()) + 1e-8
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let k = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0, 16, 16).unwrap();
        let g = random_cloud(&mut rng, 10, 1.0);
        let grads = render_backward(&g, &Se3Pose::identity(), &k, &RenderUpstream::zeros(16, 16)).unwrap();
        assert_eq!(grads.gaussians, GaussianGradients::zeros(10));
        assert_eq!(grads.pose, Vector6::zeros());
    }

    #[test]
    fn mismatched_upstream_is_rejected() {
        let k = CameraIntrinsics::new(20.0, 20.0, 8.0, 8.0, 16, 16).unwrap();
        let r = render_backward(&GaussianCloud::new(), &Se3Pose::identity(), &k, &RenderUpstream::zeros(8, 16));
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn single_gaussian_gradients_match_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let k = CameraIntrinsics::new(9.0, 9.0, 3.6, 3.4, 8, 8).unwrap();
        let mut g = GaussianCloud::new();
        g.push(
            Vector3::new(0.05, -0.03, 1.0),
            Vector3::new(-1.2, -1.5, -1.9),
            Vector4::new(0.9, 0.2, -0.3, 0.1),
            Vector3::new(0.3, -0.4, 0.8),
            0.2,
        );
        let pose = se3_exp(&TangentVector::new(0.01, 0.02, -0.01, 0.03, -0.02, 0.01));
        let up = random_upstream(&mut rng, &k);
        let grads = render_backward(&g, &pose, &k, &up).unwrap();
        let h = 1e-4;
        let fd = |f: &dyn Fn(&mut GaussianCloud, f64)| {
            let mut p = g.clone();
            f(&mut p, h);
            let mut m = g.clone();
            f(&mut m, -h);
            (linear_loss(&p, &pose, &k, &up) - linear_loss(&m, &pose, &k, &up)) / (2.0 * h)
        };
        for c in 0..3 {
            let d = fd(&|cl, e| cl.positions[0][c] += e);
            assert!(close(grads.gaussians.positions[0][c], d), "pos {c}: {} vs {d}", grads.gaussians.positions[0][c]);
            let d = fd(&|cl, e| cl.log_scales[0][c] += e);
            assert!(close(grads.gaussians.log_scales[0][c], d), "scale {c}: {} vs {d}", grads.gaussians.log_scales[0][c]);
            let d = fd(&|cl, e| cl.sh_colors[0][c] += e);
            assert!(close(grads.gaussians.sh_colors[0][c], d), "sh {c}");
        }
        for c in 0..4 {
            let d = fd(&|cl, e| cl.rotations[0][c] += e);
            assert!(close(grads.gaussians.rotations[0][c], d), "rot {c}: {} vs {d}", grads.gaussians.rotations[0][c]);
        }
        let d = fd(&|cl, e| cl.logit_opacities[0] += e);
        assert!(close(grads.gaussians.logit_opacities[0], d), "opacity");
    }

    #[test]
    fn pose_gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let k = CameraIntrinsics::new(14.0, 14.0, 7.5, 7.0, 16, 16).unwrap();
        let g = random_cloud(&mut rng, 3, 1.0);
        let pose = se3_exp(&TangentVector::new(0.02, -0.01, 0.03, -0.02, 0.01, 0.04));
        let up = random_upstream(&mut rng, &k);
        let grads = render_backward(&g, &pose, &k, &up).unwrap();
        let h = 1e-4;
        for dim in 0..6 {
            let mut e = TangentVector::zeros();
            e[dim] = h;
            let lp = linear_loss(&g, &apply_pose_update(&pose, &e), &k, &up);
            let lm = linear_loss(&g, &apply_pose_update(&pose, &(-e)), &k, &up);
            let d = (lp - lm) / (2.0 * h);
            assert!(close(grads.pose[dim], d), "pose {dim}: {} vs {d}", grads.pose[dim]);
        }
    }
}
