//! Image-quality and trajectory metrics plus the synthetic-sequence
//! generator used as ground truth.

mod report;
mod synth;

pub use report::{evaluate_reconstruction, EvaluationReport, FrameMetrics};

pub use synth::{
    generate_sequence, BreathingSpec, NoiseSpec, SurfaceSpec, SynthConfig, SyntheticSequence, TrajectorySpec,
};

use nalgebra::{Matrix3, Vector3};

use crate::buffer::{check_dims, ColorImage, Mask, ScalarImage};
use crate::error::{Error, Result};
use crate::pose::Se3Pose;

/// Value reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// `10·log10(1/MSE)` over the masked pixels and all three channels.
pub fn psnr(a: &ColorImage, b: &ColorImage, mask: &Mask) -> Result<f64> {
    check_dims("image", b.width, b.height, a.width, a.height)?;
    check_dims("mask", mask.width, mask.height, a.width, a.height)?;
    let count = mask.count();
    if count == 0 {
        return Err(Error::UndefinedMetric("PSNR over an empty mask".into()));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .zip(&mask.data)
        .filter(|(_, &m)| m)
        .map(|((x, y), _)| (x - y).norm_squared())
        .sum();
    let mse = sum / (3 * count) as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Separable "valid" Gaussian filter: output is `(w-10) × (h-10)`.
fn filter_valid(img: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = w + 1 - SSIM_WINDOW;
    let oh = h + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Single-scale SSIM on luminance with an 11×11 Gaussian window (σ = 1.5),
/// averaged over all window positions that fit inside the image.
pub fn ssim(a: &ColorImage, b: &ColorImage) -> Result<f64> {
    check_dims("image", b.width, b.height, a.width, a.height)?;
    ssim_gray(&a.luminance(), &b.luminance())
}

/// [`ssim`] on single-channel images.
pub fn ssim_gray(a: &ScalarImage, b: &ScalarImage) -> Result<f64> {
    check_dims("image", b.width, b.height, a.width, a.height)?;
    let (w, h) = (a.width, a.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {w}x{h}"
        )));
    }
    let k = ssim_kernel();
    let prod = |f: fn(f64, f64) -> f64| -> Vec<f64> { a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(&a.data, w, h, &k);
    let mu_b = filter_valid(&b.data, w, h, &k);
    let aa = filter_valid(&prod(|x, _| x * x), w, h, &k);
    let bb = filter_valid(&prod(|_, y| y * y), w, h, &k);
    let ab = filter_valid(&prod(|x, y| x * y), w, h, &k);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
            / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
    }
    Ok(total / mu_a.len() as f64)
}

/// Timestamped world-to-camera poses with strictly increasing timestamps.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Trajectory {
    entries: Vec<(f64, Se3Pose)>,
}

impl Trajectory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: Vec<(f64, Se3Pose)>) -> Result<Self> {
        let mut t = Self::new();
        for (ts, p) in entries {
            t.push(ts, p)?;
        }
        Ok(t)
    }

    pub fn push(&mut self, timestamp: f64, pose: Se3Pose) -> Result<()> {
        if !timestamp.is_finite() {
            return Err(Error::invalid("trajectory timestamps must be finite"));
        }
        if let Some(&(last, _)) = self.entries.last() {
            if timestamp <= last {
                return Err(Error::invalid(format!(
                    "trajectory timestamps must increase ({timestamp} after {last})"
                )));
            }
        }
        self.entries.push((timestamp, pose));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(f64, Se3Pose)] {
        &self.entries
    }

    pub fn poses(&self) -> impl Iterator<Item = &Se3Pose> {
        self.entries.iter().map(|(_, p)| p)
    }

    pub fn get(&self, i: usize) -> Option<&(f64, Se3Pose)> {
        self.entries.get(i)
    }

    /// Camera centers in world coordinates.
    pub fn camera_centers(&self) -> Vec<Vector3<f64>> {
        self.poses().map(|p| p.inverse().translation).collect()
    }

    /// Sum of distances between consecutive camera centers.
    pub fn path_length(&self) -> f64 {
        self.camera_centers().windows(2).map(|w| (w[1] - w[0]).norm()).sum()
    }
}

/// Rotation and translation minimizing `Σ‖r_i - (R·e_i + t)‖²`.
pub fn align_rigid(estimated: &[Vector3<f64>], reference: &[Vector3<f64>]) -> Result<(Matrix3<f64>, Vector3<f64>)> {
    if estimated.len() != reference.len() {
        return Err(Error::invalid(format!(
            "cannot align {} points onto {}",
            estimated.len(),
            reference.len()
        )));
    }
    if estimated.is_empty() {
        return Err(Error::invalid("cannot align empty point sets"));
    }
    let n = estimated.len() as f64;
    let ce = estimated.iter().sum::<Vector3<f64>>() / n;
    let cr = reference.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (e, r) in estimated.iter().zip(reference) {
        cov += (r - cr) * (e - ce).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut d = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = u * d * vt;
    Ok((r, cr - r * ce))
}

/// Root-mean-square camera-center error in millimeters after the best rigid
/// alignment of `estimated` onto `reference`.
pub fn ate(estimated: &Trajectory, reference: &Trajectory) -> Result<f64> {
    if estimated.len() != reference.len() {
        return Err(Error::invalid(format!(
            "trajectory lengths differ: {} vs {}",
            estimated.len(),
            reference.len()
        )));
    }
    for (i, ((te, _), (tr, _))) in estimated.entries.iter().zip(&reference.entries).enumerate() {
        if (te - tr).abs() > 1e-6 * tr.abs().max(1.0) {
            return Err(Error::invalid(format!("timestamp mismatch at pose {i}: {te} vs {tr}")));
        }
    }
    let e = estimated.camera_centers();
    let r = reference.camera_centers();
    let (rot, t) = align_rigid(&e, &r)?;
    let sq: f64 = e.iter().zip(&r).map(|(e, r)| (r - (rot * e + t)).norm_squared()).sum();
    Ok((sq / e.len() as f64).sqrt() * 1000.0)
}
