use nalgebra::Vector3;
use rayon::prelude::*;

use super::{bin_tiles, prepare, ProjectedGaussian, MAX_TERM_ALPHA, TILE_SIZE};
use crate::buffer::{ColorImage, ScalarImage};
use crate::pose::Se3Pose;
use crate::scene::{CameraIntrinsics, GaussianCloud};

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub color: ColorImage,
    pub depth: ScalarImage,
    pub alpha: ScalarImage,
}

impl RenderOutput {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            color: ColorImage::zeros(width, height),
            depth: ScalarImage::zeros(width, height),
            alpha: ScalarImage::zeros(width, height),
        }
    }

    pub fn width(&self) -> usize {
        self.color.width
    }

    pub fn height(&self) -> usize {
        self.color.height
    }
}

#[derive(Clone, Copy, Default)]
struct PixelAccum {
    color: Vector3<f64>,
    depth: f64,
    alpha: f64,
}

#[inline]
fn shade<'a>(gaussians: impl Iterator<Item = &'a ProjectedGaussian>, px: f64, py: f64) -> PixelAccum {
    let mut acc = PixelAccum::default();
    let mut transmittance = 1.0;
    for g in gaussians {
        if let Some((a, _)) = g.term(px, py) {
            let w = a * transmittance;
            acc.color += g.color * w;
            acc.depth += g.cam_depth * w;
            acc.alpha += w;
            transmittance *= 1.0 - a;
        }
    }
    acc
}

/// Tiled forward render.
pub fn render(cloud: &GaussianCloud, pose: &Se3Pose, k: &CameraIntrinsics) -> RenderOutput {
    let prepared = prepare(cloud, pose, k);
    let bins = bin_tiles(&prepared.sorted, k);
    let sorted = &prepared.sorted;

    let tiles: Vec<(usize, Vec<PixelAccum>)> = bins
        .lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let (tx, ty) = (tile % bins.tiles_x, tile / bins.tiles_x);
            let x0 = tx * TILE_SIZE;
            let y0 = ty * TILE_SIZE;
            let x1 = (x0 + TILE_SIZE).min(k.width);
            let y1 = (y0 + TILE_SIZE).min(k.height);
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    let it = list.iter().map(|&i| &sorted[i as usize]);
                    out.push(shade(it, x as f64, y as f64));
                }
            }
            (tile, out)
        })
        .collect();

    let mut result = RenderOutput::zeros(k.width, k.height);
    for (tile, pixels) in tiles {
        let (tx, ty) = (tile % bins.tiles_x, tile / bins.tiles_x);
        let x0 = tx * TILE_SIZE;
        let y0 = ty * TILE_SIZE;
        let x1 = (x0 + TILE_SIZE).min(k.width);
        let mut it = pixels.into_iter();
        for y in y0..(y0 + TILE_SIZE).min(k.height) {
            for x in x0..x1 {
                let p = it.next().expect("tile pixel count");
                let idx = y * k.width + x;
                result.color.data[idx] = p.color;
                result.depth.data[idx] = p.depth;
                result.alpha.data[idx] = p.alpha;
            }
        }
    }
    result
}

/// Brute-force per-pixel render over every projected Gaussian.
pub fn render_reference(cloud: &GaussianCloud, pose: &Se3Pose, k: &CameraIntrinsics) -> RenderOutput {
    let prepared = prepare(cloud, pose, k);
    let sorted = &prepared.sorted;
    let rows: Vec<Vec<PixelAccum>> = (0..k.height)
        .into_par_iter()
        .map(|y| {
            (0..k.width)
                .map(|x| shade(sorted.iter(), x as f64, y as f64))
                .collect()
        })
        .collect();
    let mut result = RenderOutput::zeros(k.width, k.height);
    for (y, row) in rows.into_iter().enumerate() {
        for (x, p) in row.into_iter().enumerate() {
            let idx = y * k.width + x;
            result.color.data[idx] = p.color;
            result.depth.data[idx] = p.depth;
            result.alpha.data[idx] = p.alpha;
        }
    }
    result
}

/// The blending structure of a render: for every pixel (row-major), the
/// source indices of the Gaussians inside their cutoff in blending order,
/// each flagged when its term hits the opacity clamp. The rendered images are
/// smooth functions of the inputs wherever this structure stays constant.
pub fn blend_structure(cloud: &GaussianCloud, pose: &Se3Pose, k: &CameraIntrinsics) -> Vec<Vec<(usize, bool)>> {
    let prepared = prepare(cloud, pose, k);
    let mut out = Vec::with_capacity(k.pixel_count());
    for y in 0..k.height {
        for x in 0..k.width {
            let terms = prepared
                .sorted
                .iter()
                .filter_map(|g| {
                    g.term(x as f64, y as f64)
                        .map(|(_, gv)| (g.source_index, g.alpha * gv >= MAX_TERM_ALPHA))
                })
                .collect();
            out.push(terms);
        }
    }
    out
}
