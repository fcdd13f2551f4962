//! Pixel-aligned Gaussian generation from RGBD frames.
//!
//! Each cell of a stride-`s` grid becomes one Gaussian in camera coordinates:
//! the cell center back-projected at the cell's mean depth, colored with the
//! cell's mean color, isotropic with the pixel footprint `s·z/fx`, opacity
//! 0.5 and identity rotation. Color and depth averages run over the cell's
//! tissue pixels with valid depth, and a cell needs such pixels to make up
//! at least half of it. Color and depth corrections start at zero and can be
//! fitted by [`refine_parameters`].

use nalgebra::{Vector3, Vector4};

use crate::buffer::{check_dims, Mask, ScalarImage};
use crate::error::{Error, Result};
use crate::frame::FrameObservation;
use crate::loss::photometric_loss;
use crate::optim::{AdamConfig, AdamState};
use crate::pose::Se3Pose;
use crate::raster::{render, render_backward};
use crate::scene::{color_to_sh, identity_quat, logit, transform_cloud, GaussianCloud};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamDefaults {
    pub opacity: f64,
    /// Multiplier on the pixel footprint used as the isotropic scale.
    pub footprint_scale: f64,
}

impl Default for ParamDefaults {
    fn default() -> Self {
        Self {
            opacity: 0.5,
            footprint_scale: 1.0,
        }
    }
}

/// Downsampled per-cell attribute grids.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeMaps {
    pub stride: usize,
    pub grid_width: usize,
    pub grid_height: usize,
    /// Cell centers `u` in pixel coordinates.
    pub pixels: Vec<(f64, f64)>,
    /// `ds(I)`: mean color over the valid tissue pixels of each cell.
    pub base_color: Vec<Vector3<f64>>,
    /// `ds(D)`: mean depth over the same pixels; 0 marks an unusable cell.
    pub base_depth: Vec<f64>,
    pub color_correction: Vec<Vector3<f64>>,
    pub depth_correction: Vec<f64>,
    pub logit_opacity: Vec<f64>,
    pub log_scale: Vec<Vector3<f64>>,
    pub rotation: Vec<Vector4<f64>>,
}

impl AttributeMaps {
    pub fn from_frame(frame: &FrameObservation, stride: usize, defaults: &ParamDefaults) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("stride must be >= 1"));
        }
        let (w, h) = (frame.width(), frame.height());
        let gw = w.div_ceil(stride);
        let gh = h.div_ceil(stride);
        let k = &frame.intrinsics;
        let cells = gw * gh;
        let mut maps = Self {
            stride,
            grid_width: gw,
            grid_height: gh,
            pixels: Vec::with_capacity(cells),
            base_color: Vec::with_capacity(cells),
            base_depth: Vec::with_capacity(cells),
            color_correction: vec![Vector3::zeros(); cells],
            depth_correction: vec![0.0; cells],
            logit_opacity: vec![logit(defaults.opacity); cells],
            log_scale: Vec::with_capacity(cells),
            rotation: vec![identity_quat(); cells],
        };
        for gy in 0..gh {
            for gx in 0..gw {
                let (x0, y0) = (gx * stride, gy * stride);
                let (x1, y1) = ((x0 + stride).min(w), (y0 + stride).min(h));
                let mut color = Vector3::zeros();
                let mut depth = 0.0;
                let mut valid = 0usize;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let idx = y * w + x;
                        if frame.depth_valid(idx) && frame.instrument_mask.data[idx] {
                            color += frame.rgb.data[idx];
                            depth += frame.depth.data[idx];
                            valid += 1;
                        }
                    }
                }
                let area = (x1 - x0) * (y1 - y0);
                // Cells need a valid majority; the rest stay unparameterized.
                let (c, z) = if 2 * valid >= area && valid > 0 {
                    (color / valid as f64, depth / valid as f64)
                } else {
                    (Vector3::zeros(), 0.0)
                };
                let center = (0.5 * (x0 + x1 - 1) as f64, 0.5 * (y0 + y1 - 1) as f64);
                let footprint = defaults.footprint_scale * stride as f64 * z / k.fx;
                maps.pixels.push(center);
                maps.base_color.push(c);
                maps.base_depth.push(z);
                maps.log_scale.push(Vector3::repeat(if z > 0.0 { footprint.ln() } else { 0.0 }));
            }
        }
        Ok(maps)
    }

    /// Pixel index nearest to the center of cell `c`.
    fn center_index(&self, c: usize, width: usize) -> usize {
        let (u, v) = self.pixels[c];
        (v.round() as usize) * width + u.round() as usize
    }

    /// One Gaussian per cell with a valid majority of tissue pixels whose
    /// center pixel (if `select` is given) lies inside `select`.
    pub fn to_camera_cloud(&self, frame: &FrameObservation, select: Option<&Mask>) -> GaussianCloud {
        let k = &frame.intrinsics;
        let mut cloud = GaussianCloud::new();
        for c in 0..self.pixels.len() {
            if self.base_depth[c] <= 0.0 {
                continue;
            }
            if select.is_some_and(|m| !m.data[self.center_index(c, frame.width())]) {
                continue;
            }
            let z = self.base_depth[c] + self.depth_correction[c];
            if !(z > k.near) {
                continue;
            }
            let color = (self.base_color[c] + self.color_correction[c]).map(|v| v.clamp(1e-4, 1.0 - 1e-4));
            let (u, v) = self.pixels[c];
            cloud.push(
                k.back_project(u, v, z),
                self.log_scale[c],
                self.rotation[c],
                color_to_sh(&color),
                self.logit_opacity[c],
            );
        }
        cloud
    }
}

/// Gaussians for every valid, tissue cell of `frame`, in camera coordinates.
pub fn parameterize_frame(frame: &FrameObservation, stride: usize, defaults: &ParamDefaults) -> Result<GaussianCloud> {
    Ok(AttributeMaps::from_frame(frame, stride, defaults)?.to_camera_cloud(frame, None))
}

/// Same as [`parameterize_frame`] restricted to pixels where `mask` is set.
pub fn parameterize_masked(
    frame: &FrameObservation,
    stride: usize,
    defaults: &ParamDefaults,
    mask: &Mask,
) -> Result<GaussianCloud> {
    check_dims("mask", mask.width, mask.height, frame.width(), frame.height())?;
    Ok(AttributeMaps::from_frame(frame, stride, defaults)?.to_camera_cloud(frame, Some(mask)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefineConfig {
    pub depth_weight: f64,
    pub lr_color: f64,
    /// Depth-correction step as a fraction of the median Gaussian depth.
    pub lr_depth_relative: f64,
    pub lr_opacity: f64,
    pub lr_scale: f64,
    pub lr_rotation: f64,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            depth_weight: 0.002,
            lr_color: 0.01,
            lr_depth_relative: 1e-3,
            lr_opacity: 0.05,
            lr_scale: 0.005,
            lr_rotation: 0.001,
        }
    }
}

/// Fits a camera-frame cloud generated from `frame` to that frame under the
/// identity pose with Adam on `|Î - I| + λ|D̂ - D|`.
///
/// Color (ΔC), depth along each pixel ray (ΔD), opacity, scale and rotation
/// are optimized. With `region`, the loss is restricted to those pixels
/// (intersected with the instrument mask). Returns the refined cloud and the
/// loss recorded before every step plus the final loss.
pub fn refine_parameters(
    cloud: &GaussianCloud,
    frame: &FrameObservation,
    iterations: usize,
    config: &RefineConfig,
    region: Option<&Mask>,
) -> Result<(GaussianCloud, Vec<f64>)> {
    let mut cloud = cloud.clone();
    if iterations == 0 || cloud.is_empty() {
        return Ok((cloud, Vec::new()));
    }
    let n = cloud.len();
    let k = &frame.intrinsics;
    let pose = Se3Pose::identity();
    let mask = match region {
        Some(r) => frame.instrument_mask.and(r),
        None => frame.instrument_mask.clone(),
    };
    let mut depths: Vec<f64> = cloud.positions.iter().map(|p| p.z).collect();
    depths.sort_by(f64::total_cmp);
    let lr_depth = config.lr_depth_relative * depths[n / 2];
    // Rays through each Gaussian's mean (z component 1).
    let rays: Vec<Vector3<f64>> = cloud.positions.iter().map(|p| p / p.z).collect();

    // Layout per Gaussian: sh(3), depth(1), opacity(1), log-scale(3), rotation(4).
    const STRIDE: usize = 12;
    let mut state = AdamState::new(n * STRIDE);
    let adam = AdamConfig::default();
    let mut history = Vec::with_capacity(iterations + 1);

    for iter in 0..=iterations {
        let out = render(&cloud, &pose, k);
        let loss = photometric_loss(&out, frame, &mask, config.depth_weight)?;
        if !loss.loss.is_finite() {
            return Err(Error::Diverged {
                frame: None,
                iteration: iter,
            });
        }
        history.push(loss.loss);
        if iter == iterations {
            break;
        }
        let grads = render_backward(&cloud, &pose, k, &loss.upstream)?;
        let g = &grads.gaussians;
        for i in 0..n {
            let base = i * STRIDE;
            for c in 0..3 {
                state.update(&adam, base + c, &mut cloud.sh_colors[i][c], g.sh_colors[i][c], config.lr_color);
            }
            let mut z = cloud.positions[i].z;
            state.update(&adam, base + 3, &mut z, rays[i].dot(&g.positions[i]), lr_depth);
            cloud.positions[i] = rays[i] * z.max(k.near * 1.01);
            state.update(&adam, base + 4, &mut cloud.logit_opacities[i], g.logit_opacities[i], config.lr_opacity);
            for c in 0..3 {
                state.update(&adam, base + 5 + c, &mut cloud.log_scales[i][c], g.log_scales[i][c], config.lr_scale);
            }
            for c in 0..4 {
                state.update(&adam, base + 8 + c, &mut cloud.rotations[i][c], g.rotations[i][c], config.lr_rotation);
            }
            cloud.rotations[i] = cloud.rotations[i].normalize();
        }
    }
    Ok((cloud, history))
}

/// Pixels whose accumulated opacity is below `threshold`: regions the
/// current model does not yet cover.
pub fn compute_expansion_mask(alpha: &ScalarImage, threshold: f64) -> Mask {
    Mask {
        width: alpha.width,
        height: alpha.height,
        data: alpha.data.iter().map(|&a| a < threshold).collect(),
    }
}

/// Options for [`expand_scene`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpansionOptions {
    pub stride: usize,
    pub defaults: ParamDefaults,
    /// Refinement iterations for the new Gaussians (0 disables).
    pub refine_iterations: usize,
    pub refine: RefineConfig,
}

/// Generates Gaussians for the `mask` pixels of `frame`, moves them into the
/// world frame (`pose` is world-to-camera) and appends them to `model` with
/// fresh deformation curves. Existing Gaussians are untouched.
pub fn expand_scene(
    model: &GaussianCloud,
    frame: &FrameObservation,
    mask: &Mask,
    pose: &Se3Pose,
    options: &ExpansionOptions,
) -> Result<GaussianCloud> {
    let mut merged = model.clone();
    let added = parameterize_masked(frame, options.stride, &options.defaults, mask)?;
    if added.is_empty() {
        return Ok(merged);
    }
    let added = if options.refine_iterations > 0 {
        refine_parameters(&added, frame, options.refine_iterations, &options.refine, Some(mask))?.0
    } else {
        added
    };
    merged.merge_fresh(&transform_cloud(&added, &pose.inverse()));
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::buffer::ColorImage;
    use crate::deform::DeformationParams;
    use crate::raster::project_gaussian;
    use crate::scene::CameraIntrinsics;
    use approx::assert_abs_diff_eq;

    fn flat_frame(w: usize, h: usize, fx: f64, depth: f64, color: Vector3<f64>) -> FrameObservation {
        let k = CameraIntrinsics::new(fx, fx, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h).unwrap();
        FrameObservation::new(0.0, ColorImage::filled(w, h, color), ScalarImage::filled(w, h, depth), None, k).unwrap()
    }

    #[test]
    fn back_projection_examples() {
        let k = CameraIntrinsics::new(100.0, 100.0, 10.0, 10.0, 120, 21).unwrap();
        let mut depth = ScalarImage::zeros(120, 21);
        depth.set(10, 10, 1.0);
        depth.set(110, 10, 2.0);
        let f = FrameObservation::new(0.0, ColorImage::filled(120, 21, Vector3::repeat(0.3)), depth, None, k).unwrap();
        let g = parameterize_frame(&f, 1, &ParamDefaults::default()).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g.positions[0], Vector3::new(0.0, 0.0, 1.0));
        assert_abs_diff_eq!(g.positions[1], Vector3::new(2.0, 0.0, 2.0), epsilon = 1e-15);
        assert_abs_diff_eq!(g.opacity(0), 0.5, epsilon = 1e-15);
        assert_eq!(g.rotations[0], identity_quat());
    }

    #[test]
    fn footprint_scale() {
        let f = flat_frame(16, 16, 100.0, 1.0, Vector3::repeat(0.5));
        let g = parameterize_frame(&f, 4, &ParamDefaults::default()).unwrap();
        assert_eq!(g.len(), 16);
        assert_abs_diff_eq!(g.scale(0), Vector3::repeat(0.04), epsilon = 1e-15);
    }

    #[test]
    fn invalid_pixels_produce_nothing() {
        let mut f = flat_frame(8, 8, 10.0, 1.0, Vector3::repeat(0.5));
        f.depth = ScalarImage::zeros(8, 8);
        assert!(parameterize_frame(&f, 2, &ParamDefaults::default()).unwrap().is_empty());
        let mut f = flat_frame(8, 8, 10.0, 1.0, Vector3::repeat(0.5));
        f.instrument_mask = Mask::empty(8, 8);
        assert!(parameterize_frame(&f, 1, &ParamDefaults::default()).unwrap().is_empty());
        assert!(parameterize_frame(&f, 0, &ParamDefaults::default()).is_err());
    }

    #[test]
    fn projection_roundtrip() {
        let f = flat_frame(23, 17, 20.0, 1.3, Vector3::repeat(0.5));
        let maps = AttributeMaps::from_frame(&f, 3, &ParamDefaults::default()).unwrap();
        assert_eq!((maps.grid_width, maps.grid_height), (8, 6));
        let g = maps.to_camera_cloud(&f, None);
        for (i, &(x, y)) in maps.pixels.iter().enumerate() {
            let p = project_gaussian(&g.positions[i], &g.covariance(i), &Se3Pose::identity(), &f.intrinsics).unwrap();
            assert!((p.mean2d.x - x).abs() < 1e-9 && (p.mean2d.y - y).abs() < 1e-9);
            let (cx, cy) = ((i % 8) * 3, (i / 8) * 3);
            assert!((x - cx as f64).abs() <= 1.0 && (y - cy as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn refinement_zero_iterations_is_identity() {
        let f = flat_frame(8, 8, 10.0, 1.0, Vector3::new(0.2, 0.5, 0.7));
        let g = parameterize_frame(&f, 2, &ParamDefaults::default()).unwrap();
        let (r, hist) = refine_parameters(&g, &f, 0, &RefineConfig::default(), None).unwrap();
        assert_eq!(r, g);
        assert!(hist.is_empty());
    }

    #[test]
    fn refinement_fits_flat_frame() {
        let f = flat_frame(16, 16, 16.0, 1.0, Vector3::new(0.2, 0.5, 0.7));
        let g = parameterize_frame(&f, 2, &ParamDefaults::default()).unwrap();
        let (_, hist) = refine_parameters(&g, &f, 100, &RefineConfig::default(), None).unwrap();
        let last = *hist.last().unwrap();
        assert!(last < 0.01, "final loss {last} (initial {})", hist[0]);
    }

    #[test]
    fn expansion_mask_examples() {
        let full = ScalarImage::filled(4, 2, 1.0);
        assert_eq!(compute_expansion_mask(&full, 0.8).count(), 0);
        let none = ScalarImage::filled(4, 2, 0.0);
        assert_eq!(compute_expansion_mask(&none, 0.8).count(), 8);
        let split = ScalarImage::from_fn(4, 2, |x, _| if x < 2 { 0.9 } else { 0.1 });
        let m = compute_expansion_mask(&split, 0.8);
        assert_eq!(m, Mask::from_fn(4, 2, |x, _| x >= 2));
    }

    fn opts(stride: usize) -> ExpansionOptions {
        ExpansionOptions {
            stride,
            defaults: ParamDefaults::default(),
            refine_iterations: 0,
            refine: RefineConfig::default(),
        }
    }

    #[test]
    fn expansion_counts_and_preserves_existing() {
        let f = flat_frame(16, 12, 16.0, 1.0, Vector3::repeat(0.4));
        let mut model = GaussianCloud::with_deformation(DeformationParams::new(0, 4, 1.0).unwrap());
        model.push(Vector3::new(0.0, 0.0, 3.0), Vector3::repeat(-2.0), identity_quat(), Vector3::zeros(), 0.0);
        model.deformation.weights_mut(0, 1)[0] = 0.25;

        let same = expand_scene(&model, &f, &Mask::empty(16, 12), &Se3Pose::identity(), &opts(2)).unwrap();
        assert_eq!(same, model);

        let pose = Se3Pose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let grown = expand_scene(&model, &f, &Mask::full(16, 12), &pose, &opts(2)).unwrap();
        assert_eq!(grown.len(), 1 + 8 * 6);
        assert_eq!(grown.positions[0], model.positions[0]);
        assert_eq!(grown.deformation.weights(0, 1), model.deformation.weights(0, 1));
        assert!(grown.deformation.weights(5, 1).iter().all(|&w| w == 0.0));
        grown.validate().unwrap();
        // New points land in world coordinates: camera-frame x shifted by -0.1.
        let first_new = parameterize_frame(&f, 2, &ParamDefaults::default()).unwrap().positions[0];
        assert_abs_diff_eq!(grown.positions[1], first_new - Vector3::new(0.1, 0.0, 0.0), epsilon = 1e-15);
    }
}
