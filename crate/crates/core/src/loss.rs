//! Masked L1 photometric/depth loss and the mean-displacement regularizer.

use nalgebra::Vector3;

use crate::buffer::{check_dims, Mask, ScalarImage};
use crate::error::Result;
use crate::frame::FrameObservation;
use crate::raster::{RenderOutput, RenderUpstream};
use crate::scene::GaussianCloud;

#[derive(Debug, Clone, PartialEq)]
pub struct PhotometricLoss {
    pub loss: f64,
    pub color_term: f64,
    pub depth_term: f64,
    pub upstream: RenderUpstream,
}

/// Rendered alpha below which a pixel's depth is too poorly supported to
/// compare.
pub const DEPTH_MIN_ALPHA: f64 = 0.5;

/// `mean|Î - I| + λ_D·mean|D̂/α - D|` over `mask`.
///
/// The color mean runs over masked pixels and the three channels. The depth
/// term compares the alpha-normalized rendered depth (the expected depth of
/// the visible surface) with the observation, averaged over masked pixels
/// with valid observed depth and rendered alpha of at least
/// [`DEPTH_MIN_ALPHA`]. An empty mask gives zero loss and zero gradients.
pub fn photometric_loss(
    render: &RenderOutput,
    frame: &FrameObservation,
    mask: &Mask,
    depth_weight: f64,
) -> Result<PhotometricLoss> {
    let (w, h) = (frame.width(), frame.height());
    check_dims("render", render.width(), render.height(), w, h)?;
    check_dims("mask", mask.width, mask.height, w, h)?;
    let mut upstream = RenderUpstream::zeros(w, h);
    let use_depth = |i: usize| mask.data[i] && frame.depth_valid(i) && render.alpha.data[i] >= DEPTH_MIN_ALPHA;

    let color_count = mask.count();
    let depth_count = (0..mask.data.len()).filter(|&i| use_depth(i)).count();
    let mut alpha_grad = ScalarImage::zeros(w, h);

    let mut color_sum = 0.0;
    let mut depth_sum = 0.0;
    let gc = if color_count > 0 { 1.0 / (3.0 * color_count as f64) } else { 0.0 };
    let gd = if depth_count > 0 { depth_weight / depth_count as f64 } else { 0.0 };
    for i in 0..mask.data.len() {
        if !mask.data[i] {
            continue;
        }
        let diff: Vector3<f64> = render.color.data[i] - frame.rgb.data[i];
        color_sum += diff.abs().sum();
        upstream.color.data[i] = diff.map(sign) * gc;
        if gd > 0.0 && use_depth(i) {
            let a = render.alpha.data[i];
            let dd = render.depth.data[i] / a - frame.depth.data[i];
            depth_sum += dd.abs();
            let g = sign(dd) * gd;
            upstream.depth.data[i] = g / a;
            alpha_grad.data[i] = -g * render.depth.data[i] / (a * a);
        }
    }
    if gd > 0.0 {
        upstream.alpha = Some(alpha_grad);
    }
    let color_term = color_sum * gc;
    let depth_term = depth_sum * gd;
    Ok(PhotometricLoss {
        loss: color_term + depth_term,
        color_term,
        depth_term,
        upstream,
    })
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// `‖(1/N) Σ_n Φ^μ_n(t)‖²` and its gradient with respect to each Gaussian's
/// position offset (identical for all Gaussians: `2·mean/N`).
pub fn movement_regularizer(cloud: &GaussianCloud, t: f64) -> (f64, Vector3<f64>) {
    let n = cloud.len();
    if n == 0 || cloud.deformation.is_static() {
        return (0.0, Vector3::zeros());
    }
    let mut sum = Vector3::zeros();
    for i in 0..n {
        sum += cloud.deformation.position_offset(i, t);
    }
    let mean = sum / n as f64;
    (mean.norm_squared(), mean * (2.0 / n as f64))
}
