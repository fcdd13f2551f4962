//! Time-decoupled deformation model.
//!
//! Every attribute of a Gaussian (position, rotation, log-scale, SH color)
//! deviates from its canonical value by `Φ(t) = Σ_j w_j·exp(-(t-τ_j)²/(2σ_j²))`.
//! The center `τ_j` and width `σ_j` of basis `j` are shared by all 13
//! attribute dimensions of one Gaussian; the weights are per dimension.
//! During training only the bases whose initial center lies near the current
//! time receive gradients (partial activation); evaluation always sums all
//! bases.

use nalgebra::{Matrix3, Vector3, Vector4};

use crate::error::{Error, Result};
use crate::scene::{quat_mul, GaussianCloud, GaussianGradients};

/// Deformed attribute dimensions: 3 position, 4 rotation, 3 log-scale, 3 SH.
pub const DEFORM_DIMS: usize = 13;
/// Parameters per basis: center, log-width, then the weights.
pub const PARAMS_PER_BASIS: usize = 2 + DEFORM_DIMS;

const POS: usize = 0;
const ROT: usize = 3;
const SCALE: usize = 7;
const COLOR: usize = 10;

/// Per-Gaussian basis curves, stored flat as
/// `[gaussian][basis][τ, log σ, w_0 … w_12]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationParams {
    basis_count: usize,
    t_max: f64,
    count: usize,
    params: Vec<f64>,
}

/// Initial basis centers `t_max·j/(B-1)`.
pub fn initial_centers(basis_count: usize, t_max: f64) -> Vec<f64> {
    (0..basis_count)
        .map(|j| t_max * j as f64 / (basis_count - 1) as f64)
        .collect()
}

/// Fresh curves for `count` Gaussians: evenly spaced centers, width equal to
/// the center spacing, zero weights.
pub fn init_deformation(count: usize, basis_count: usize, t_max: f64) -> Result<DeformationParams> {
    DeformationParams::new(count, basis_count, t_max)
}

impl DeformationParams {
    pub fn new(count: usize, basis_count: usize, t_max: f64) -> Result<Self> {
        if basis_count < 2 {
            return Err(Error::invalid(format!("basis count must be >= 2, got {basis_count}")));
        }
        if !(t_max.is_finite() && t_max > 0.0) {
            return Err(Error::invalid(format!("time span must be positive, got {t_max}")));
        }
        let mut d = Self {
            basis_count,
            t_max,
            count: 0,
            params: Vec::new(),
        };
        d.push_zeroed(count);
        Ok(d)
    }

    /// No basis functions: the cloud is static.
    pub fn none(count: usize) -> Self {
        Self {
            basis_count: 0,
            t_max: 1.0,
            count,
            params: Vec::new(),
        }
    }

    /// Rebuilds from raw storage (used by the checkpoint reader).
    pub fn from_raw(count: usize, basis_count: usize, t_max: f64, params: Vec<f64>) -> Result<Self> {
        if params.len() != count * basis_count * PARAMS_PER_BASIS {
            return Err(Error::invalid("deformation parameter length mismatch"));
        }
        Ok(Self {
            basis_count,
            t_max,
            count,
            params,
        })
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn basis_count(&self) -> usize {
        self.basis_count
    }

    pub fn t_max(&self) -> f64 {
        self.t_max
    }

    pub fn is_static(&self) -> bool {
        self.basis_count == 0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.params
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Offset of basis `j` of Gaussian `n` in the flat storage.
    #[inline]
    pub fn offset(&self, n: usize, j: usize) -> usize {
        (n * self.basis_count + j) * PARAMS_PER_BASIS
    }

    pub fn tau(&self, n: usize, j: usize) -> f64 {
        self.params[self.offset(n, j)]
    }

    pub fn log_sigma(&self, n: usize, j: usize) -> f64 {
        self.params[self.offset(n, j) + 1]
    }

    pub fn weights(&self, n: usize, j: usize) -> &[f64] {
        let o = self.offset(n, j) + 2;
        &self.params[o..o + DEFORM_DIMS]
    }

    pub fn basis_mut(&mut self, n: usize, j: usize) -> &mut [f64] {
        let o = self.offset(n, j);
        &mut self.params[o..o + PARAMS_PER_BASIS]
    }

    pub fn weights_mut(&mut self, n: usize, j: usize) -> &mut [f64] {
        let o = self.offset(n, j) + 2;
        &mut self.params[o..o + DEFORM_DIMS]
    }

    /// Appends `k` Gaussians with freshly initialized curves.
    pub fn push_zeroed(&mut self, k: usize) {
        self.count += k;
        if self.basis_count == 0 {
            return;
        }
        let centers = initial_centers(self.basis_count, self.t_max);
        let log_sigma = (self.t_max / (self.basis_count - 1) as f64).ln();
        self.params.reserve(k * self.basis_count * PARAMS_PER_BASIS);
        for _ in 0..k {
            for &tau in &centers {
                self.params.push(tau);
                self.params.push(log_sigma);
                self.params.extend_from_slice(&[0.0; DEFORM_DIMS]);
            }
        }
    }

    /// Applies a rigid rotation to the position weights and left-multiplies
    /// the rotation weights by `q`.
    pub(crate) fn rotate_weights(&mut self, rotation: &Matrix3<f64>, q: &Vector4<f64>) {
        for chunk in self.params.chunks_exact_mut(PARAMS_PER_BASIS) {
            let w = &mut chunk[2..];
            let p = rotation * Vector3::new(w[POS], w[POS + 1], w[POS + 2]);
            w[POS..POS + 3].copy_from_slice(p.as_slice());
            let r = quat_mul(q, &Vector4::new(w[ROT], w[ROT + 1], w[ROT + 2], w[ROT + 3]));
            w[ROT..ROT + 4].copy_from_slice(r.as_slice());
        }
    }

    /// `Φ_n(t)` summed over all bases.
    pub fn evaluate(&self, n: usize, t: f64) -> [f64; DEFORM_DIMS] {
        let mut out = [0.0; DEFORM_DIMS];
        for j in 0..self.basis_count {
            let o = self.offset(n, j);
            let e = basis_envelope(t, self.params[o], self.params[o + 1]);
            if e == 0.0 {
                continue;
            }
            for (acc, w) in out.iter_mut().zip(&self.params[o + 2..o + PARAMS_PER_BASIS]) {
                *acc += w * e;
            }
        }
        out
    }

    /// Position part of `Φ_n(t)`.
    pub fn position_offset(&self, n: usize, t: f64) -> Vector3<f64> {
        let mut out = Vector3::zeros();
        for j in 0..self.basis_count {
            let o = self.offset(n, j);
            let e = basis_envelope(t, self.params[o], self.params[o + 1]);
            out += Vector3::new(self.params[o + 2], self.params[o + 3], self.params[o + 4]) * e;
        }
        out
    }
}

#[inline]
fn basis_envelope(t: f64, tau: f64, log_sigma: f64) -> f64 {
    let sigma = log_sigma.exp();
    let d = t - tau;
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

/// `w·exp(-(t-τ)²/(2σ²))` with `σ = exp(log_σ)`.
pub fn eval_basis(t: f64, tau: f64, log_sigma: f64, weight: f64) -> f64 {
    weight * basis_envelope(t, tau, log_sigma)
}

/// Sorted basis indices that receive gradients at time `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActiveSet {
    pub indices: Vec<usize>,
}

impl ActiveSet {
    pub fn all(basis_count: usize) -> Self {
        Self {
            indices: (0..basis_count).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, j: usize) -> bool {
        self.indices.binary_search(&j).is_ok()
    }
}

/// Bases whose initial center lies strictly inside
/// `(t - t_max·m/(B-1), t + t_max·m/(B-1))`.
///
/// The comparison is carried out in basis-index units,
/// `|j - t·(B-1)/t_max| < m`, so window edges that fall exactly on a center
/// are excluded without rounding noise.
pub fn active_indices(t: f64, basis_count: usize, half_width: usize, t_max: f64) -> ActiveSet {
    if basis_count < 2 {
        return ActiveSet::all(basis_count);
    }
    let pos = t * (basis_count - 1) as f64 / t_max;
    let m = half_width as f64;
    ActiveSet {
        indices: (0..basis_count)
            .filter(|&j| (j as f64 - pos).abs() < m)
            .collect(),
    }
}

/// Deformed attributes at time `t`. The result is a static cloud.
///
/// Position, log-scale and SH color are offset additively; the rotation is
/// `normalize(r₀ + Φ^r(t))`; opacity is not deformed.
pub fn apply_deformation(cloud: &GaussianCloud, t: f64) -> GaussianCloud {
    let d = &cloud.deformation;
    let mut out = GaussianCloud {
        positions: cloud.positions.clone(),
        log_scales: cloud.log_scales.clone(),
        rotations: cloud.rotations.clone(),
        sh_colors: cloud.sh_colors.clone(),
        logit_opacities: cloud.logit_opacities.clone(),
        deformation: DeformationParams::none(cloud.len()),
    };
    if d.is_static() {
        return out;
    }
    for n in 0..cloud.len() {
        let phi = d.evaluate(n, t);
        if phi.iter().all(|&v| v == 0.0) {
            continue;
        }
        out.positions[n] += Vector3::new(phi[POS], phi[POS + 1], phi[POS + 2]);
        let r = cloud.rotations[n] + Vector4::new(phi[ROT], phi[ROT + 1], phi[ROT + 2], phi[ROT + 3]);
        out.rotations[n] = r.normalize();
        out.log_scales[n] += Vector3::new(phi[SCALE], phi[SCALE + 1], phi[SCALE + 2]);
        out.sh_colors[n] += Vector3::new(phi[COLOR], phi[COLOR + 1], phi[COLOR + 2]);
    }
    out
}

/// Gradients on the parameters of the active bases only, laid out as
/// `[gaussian][active basis k][τ, log σ, w_0 … w_12]`.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationGradients {
    pub active: ActiveSet,
    pub values: Vec<f64>,
}

impl DeformationGradients {
    #[inline]
    pub fn offset(&self, n: usize, k: usize) -> usize {
        (n * self.active.len() + k) * PARAMS_PER_BASIS
    }

    /// Dense gradient in the layout of [`DeformationParams`]; inactive
    /// entries are zero.
    pub fn to_dense(&self, params: &DeformationParams) -> Vec<f64> {
        let mut dense = vec![0.0; params.as_slice().len()];
        for n in 0..params.len() {
            for (k, &j) in self.active.indices.iter().enumerate() {
                let src = self.offset(n, k);
                let dst = params.offset(n, j);
                dense[dst..dst + PARAMS_PER_BASIS]
                    .copy_from_slice(&self.values[src..src + PARAMS_PER_BASIS]);
            }
        }
        dense
    }
}

/// Chain rule from gradients on the deformed attributes (as produced by the
/// rasterizer for `apply_deformation(cloud, t)`) to the active basis
/// parameters.
pub fn deformation_backward(
    cloud: &GaussianCloud,
    t: f64,
    upstream: &GaussianGradients,
    active: &ActiveSet,
) -> Result<DeformationGradients> {
    let d = &cloud.deformation;
    if upstream.len() != cloud.len() {
        return Err(Error::invalid("upstream gradient count does not match cloud"));
    }
    if active.indices.iter().any(|&j| j >= d.basis_count()) {
        return Err(Error::invalid("active basis index out of range"));
    }
    let a = active.len();
    let mut values = vec![0.0; cloud.len() * a * PARAMS_PER_BASIS];
    if a == 0 {
        return Ok(DeformationGradients {
            active: active.clone(),
            values,
        });
    }
    for n in 0..cloud.len() {
        let mut g = [0.0; DEFORM_DIMS];
        g[POS..POS + 3].copy_from_slice(upstream.positions[n].as_slice());
        g[SCALE..SCALE + 3].copy_from_slice(upstream.log_scales[n].as_slice());
        g[COLOR..COLOR + 3].copy_from_slice(upstream.sh_colors[n].as_slice());
        // The rasterizer differentiates through its own normalization of the
        // (already unit) deformed quaternion, which leaves the tangential
        // projection of ∂L/∂q̂; the outer normalization adds the 1/|v| factor.
        let rg = upstream.rotations[n];
        if rg.iter().any(|&v| v != 0.0) {
            let phi = d.evaluate(n, t);
            let v = cloud.rotations[n] + Vector4::new(phi[ROT], phi[ROT + 1], phi[ROT + 2], phi[ROT + 3]);
            let qhat = v.normalize();
            let tangential = rg - qhat * qhat.dot(&rg);
            let scaled = tangential / v.norm();
            g[ROT..ROT + 4].copy_from_slice(scaled.as_slice());
        }
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        for (k, &j) in active.indices.iter().enumerate() {
            let o = d.offset(n, j);
            let p = &d.as_slice()[o..o + PARAMS_PER_BASIS];
            let (tau, log_sigma) = (p[0], p[1]);
            let sigma2 = (2.0 * log_sigma).exp();
            let dt = t - tau;
            let e = (-(dt * dt) / (2.0 * sigma2)).exp();
            let out = &mut values[(n * a + k) * PARAMS_PER_BASIS..(n * a + k + 1) * PARAMS_PER_BASIS];
            let mut g_phi = 0.0;
            for dim in 0..DEFORM_DIMS {
                out[2 + dim] = g[dim] * e;
                g_phi += g[dim] * p[2 + dim] * e;
            }
            out[0] = g_phi * dt / sigma2;
            out[1] = g_phi * dt * dt / sigma2;
        }
    }
    Ok(DeformationGradients {
        active: active.clone(),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::identity_quat;
    use approx::assert_abs_diff_eq;

    fn cloud_with(n: usize, basis: usize) -> GaussianCloud {
        let mut g = GaussianCloud::with_deformation(DeformationParams::new(0, basis, 1.0).unwrap());
        for i in 0..n {
            g.push(
                Vector3::new(i as f64 * 0.1, 0.0, 1.0),
                Vector3::repeat(-3.0),
                Vector4::new(1.0, 0.1 * i as f64, 0.0, 0.0),
                Vector3::new(0.1, 0.0, -0.1),
                0.0,
            );
        }
        g
    }

    #[test]
    fn init_examples() {
        let d = init_deformation(1, 20, 1.0).unwrap();
        for j in 0..20 {
            assert_abs_diff_eq!(d.tau(0, j), j as f64 / 19.0, epsilon = 1e-15);
            assert_abs_diff_eq!(d.log_sigma(0, j).exp(), 1.0 / 19.0, epsilon = 1e-15);
        }
        for t in [0.0, 0.3, 1.0] {
            assert!(d.evaluate(0, t).iter().all(|&v| v == 0.0));
        }
        let d = init_deformation(1, 2, 10.0).unwrap();
        assert_eq!((d.tau(0, 0), d.tau(0, 1)), (0.0, 10.0));
        assert_abs_diff_eq!(d.log_sigma(0, 0).exp(), 10.0, epsilon = 1e-12);
        assert!(init_deformation(1, 1, 1.0).is_err());
        assert!(init_deformation(1, 4, 0.0).is_err());
    }

    #[test]
    fn basis_examples() {
        assert_eq!(eval_basis(0.3, 0.3, -1.0, 2.5), 2.5);
        assert_eq!(eval_basis(0.9, 0.3, -1.0, 0.0), 0.0);
        let sigma: f64 = 0.2;
        assert_abs_diff_eq!(eval_basis(0.5 + sigma, 0.5, sigma.ln(), 1.0), 0.6065306597, epsilon = 1e-9);
    }

    #[test]
    fn active_set_examples() {
        assert_eq!(active_indices(0.0, 20, 4, 1.0).indices, vec![0, 1, 2, 3]);
        assert_eq!(active_indices(0.5, 20, 4, 1.0).indices, (6..=13).collect::<Vec<_>>());
        assert_eq!(active_indices(0.5, 20, 20, 1.0).indices, (0..20).collect::<Vec<_>>());
        assert_eq!(active_indices(0.5, 20, 25, 1.0).indices.len(), 20);
        for k in 0..=100 {
            let s = active_indices(k as f64 / 100.0, 20, 4, 1.0);
            assert!(s.len() <= 8);
        }
    }

    #[test]
    fn fresh_model_is_identity() {
        let g = cloud_with(3, 20);
        let d = apply_deformation(&g, 0.37);
        assert_eq!(d.positions, g.positions);
        assert_eq!(d.rotations, g.rotations);
        assert_eq!(d.log_scales, g.log_scales);
        assert_eq!(d.sh_colors, g.sh_colors);
    }

    #[test]
    fn single_basis_peak_and_cancellation() {
        let mut g = cloud_with(1, 4);
        {
            let b = g.deformation.basis_mut(0, 1);
            b[0] = 0.5;
            b[1] = 0.1f64.ln();
            b[2] = 0.02;
        }
        let d = apply_deformation(&g, 0.5);
        assert_abs_diff_eq!(d.positions[0].x, g.positions[0].x + 0.02, epsilon = 1e-15);

        {
            let b = g.deformation.basis_mut(0, 2);
            b[0] = 0.5;
            b[1] = 0.1f64.ln();
            b[2] = -0.02;
        }
        let d = apply_deformation(&g, 0.5);
        assert_abs_diff_eq!(d.positions[0].x, g.positions[0].x, epsilon = 1e-15);
    }

    #[test]
    fn deformed_rotations_are_unit() {
        let mut g = cloud_with(4, 6);
        for n in 0..4 {
            for j in 0..6 {
                let w = g.deformation.weights_mut(n, j);
                w[ROT] = 0.3 * (n as f64 - j as f64);
                w[ROT + 2] = 0.2;
            }
        }
        for k in 0..20 {
            let d = apply_deformation(&g, k as f64 / 19.0);
            for q in &d.rotations {
                assert!((q.norm() - 1.0).abs() < 1e-9);
            }
        }
        let _ = identity_quat();
    }

    #[test]
    fn locality_bound() {
        let mut g = cloud_with(1, 10);
        for j in 0..10 {
            g.deformation.weights_mut(0, j)[0] = if j % 2 == 0 { 0.7 } else { -0.4 };
        }
        let d = &g.deformation;
        for k in 0..50 {
            let t = k as f64 / 49.0;
            for j in 0..10 {
                let contribution = eval_basis(t, d.tau(0, j), d.log_sigma(0, j), d.weights(0, j)[0]);
                let sigma = d.log_sigma(0, j).exp();
                let delta = (t - d.tau(0, j)).abs();
                let bound = d.weights(0, j)[0].abs() * (-(delta * delta) / (2.0 * sigma * sigma)).exp();
                assert!(contribution.abs() <= bound * (1.0 + 1e-12));
            }
        }
    }

    fn random_params(g: &mut GaussianCloud, seed: u64) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let b = g.deformation.basis_count();
        for n in 0..g.len() {
            for j in 0..b {
                let p = g.deformation.basis_mut(n, j);
                p[0] += rng.random_range(-0.05..0.05);
                p[1] += rng.random_range(-0.3..0.3);
                for w in &mut p[2..] {
                    *w = rng.random_range(-0.1..0.1);
                }
            }
        }
    }

    /// Linear functional `L = Σ c · deformed attributes` with random weights.
    fn probe_loss(g: &GaussianCloud, t: f64, c: &GaussianGradients) -> f64 {
        let d = apply_deformation(g, t);
        let mut l = 0.0;
        for n in 0..g.len() {
            l += d.positions[n].dot(&c.positions[n])
                + d.log_scales[n].dot(&c.log_scales[n])
                + d.sh_colors[n].dot(&c.sh_colors[n]);
            // Rasterizer convention: gradient w.r.t. its internally normalized quaternion.
            l += d.rotations[n].normalize().dot(&c.rotations[n]);
        }
        l
    }

    fn probe_upstream(g: &GaussianCloud, t: f64, c: &GaussianGradients) -> GaussianGradients {
        // What a renderer reports for L above: tangential part for rotations.
        let d = apply_deformation(g, t);
        let mut up = c.clone();
        for n in 0..g.len() {
            let q = d.rotations[n];
            up.rotations[n] = c.rotations[n] - q * q.dot(&c.rotations[n]);
        }
        up
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut g = cloud_with(3, 6);
        random_params(&mut g, 9);
        let mut c = GaussianGradients::zeros(3);
        for n in 0..3 {
            c.positions[n] = Vector3::new(0.3, -0.2, 0.5 + n as f64);
            c.log_scales[n] = Vector3::new(-0.1, 0.4, 0.2);
            c.sh_colors[n] = Vector3::new(0.7, 0.1, -0.3);
            c.rotations[n] = Vector4::new(0.2, -0.5, 0.3, 0.9);
        }
        let t = 0.42;
        let active = ActiveSet::all(6);
        let grads = deformation_backward(&g, t, &probe_upstream(&g, t, &c), &active).unwrap();
        let dense = grads.to_dense(&g.deformation);
        let h = 1e-6;
        for idx in 0..dense.len() {
            let mut gp = g.clone();
            gp.deformation.as_mut_slice()[idx] += h;
            let mut gm = g.clone();
            gm.deformation.as_mut_slice()[idx] -= h;
            let fd = (probe_loss(&gp, t, &c) - probe_loss(&gm, t, &c)) / (2.0 * h);
            let err = (fd - dense[idx]).abs();
            assert!(err <= 1e-3 * fd.abs().max(dense[idx].abs()) + 1e-8, "param {idx}: fd {fd} vs {}", dense[idx]);
        }
    }

    #[test]
    fn backward_masks_inactive_bases() {
        let mut g = cloud_with(2, 20);
        random_params(&mut g, 4);
        let mut up = GaussianGradients::zeros(2);
        up.positions[0] = Vector3::new(1.0, 1.0, 1.0);
        up.sh_colors[1] = Vector3::new(1.0, -1.0, 0.5);
        let active = active_indices(0.0, 20, 4, 1.0);
        let grads = deformation_backward(&g, 0.0, &up, &active).unwrap();
        let dense = grads.to_dense(&g.deformation);
        for n in 0..2 {
            for j in 4..20 {
                let o = g.deformation.offset(n, j);
                assert!(dense[o..o + PARAMS_PER_BASIS].iter().all(|&v| v == 0.0));
            }
        }
        let zero = deformation_backward(&g, 0.0, &GaussianGradients::zeros(2), &ActiveSet::all(20)).unwrap();
        assert!(zero.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn restricted_equals_full_when_weights_are_local() {
        let mut g = cloud_with(2, 20);
        for n in 0..2 {
            for j in 7..=12 {
                g.deformation.weights_mut(n, j)[1] = 0.01 * j as f64;
            }
        }
        let mut up = GaussianGradients::zeros(2);
        up.positions[0] = Vector3::new(0.5, 1.0, 0.0);
        up.positions[1] = Vector3::new(-0.5, 2.0, 0.3);
        let t = 0.5;
        let active = active_indices(t, 20, 4, 1.0);
        let part = deformation_backward(&g, t, &up, &active).unwrap().to_dense(&g.deformation);
        let full = deformation_backward(&g, t, &up, &ActiveSet::all(20)).unwrap().to_dense(&g.deformation);
        for n in 0..2 {
            for &j in &active.indices {
                let o = g.deformation.offset(n, j);
                assert_eq!(&part[o..o + PARAMS_PER_BASIS], &full[o..o + PARAMS_PER_BASIS]);
            }
        }
    }
}
