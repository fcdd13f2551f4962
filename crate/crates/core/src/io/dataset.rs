//! Dataset manifests: a JSON document listing intrinsics, the depth scale
//! and per-frame PNG files (8-bit RGB, 16-bit depth, optional 8-bit mask).

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffer::{ColorImage, Mask, ScalarImage};
use crate::error::{Error, Result};
use crate::frame::{Dataset, FrameObservation};
use crate::pose::Se3Pose;
use crate::scene::CameraIntrinsics;

/// Depth PNG units per meter when a manifest does not say otherwise.
pub const DEFAULT_DEPTH_SCALE: f64 = 1000.0;

/// Mask pixels at or above this 8-bit value are tissue.
const MASK_THRESHOLD: u8 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifestIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl From<&CameraIntrinsics> for ManifestIntrinsics {
    fn from(k: &CameraIntrinsics) -> Self {
        Self {
            fx: k.fx,
            fy: k.fy,
            cx: k.cx,
            cy: k.cy,
            width: k.width,
            height: k.height,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub timestamp: f64,
    /// Paths are relative to the manifest's directory unless absolute.
    pub rgb: PathBuf,
    pub depth: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
    /// Ground-truth world-to-camera pose, row-major 4×4.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_pose: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub intrinsics: ManifestIntrinsics,
    #[serde(default = "default_depth_scale")]
    pub depth_scale: f64,
    /// Duration of the sequence; defaults to the last frame's timestamp.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_max: Option<f64>,
    pub frames: Vec<FrameRecord>,
}

fn default_depth_scale() -> f64 {
    DEFAULT_DEPTH_SCALE
}

impl DatasetManifest {
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Load {
            context: format!("manifest {}", path.display()),
            reason: e.to_string(),
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if !(self.depth_scale.is_finite() && self.depth_scale > 0.0) {
            return Err(load_error("manifest", "depth_scale must be positive"));
        }
        let mut last = f64::NEG_INFINITY;
        for (i, f) in self.frames.iter().enumerate() {
            if !f.timestamp.is_finite() || f.timestamp <= last {
                return Err(load_error(
                    &format!("frame {i}"),
                    format!("timestamp {} does not increase (previous {last})", f.timestamp),
                ));
            }
            last = f.timestamp;
        }
        if let Some(t_max) = self.t_max {
            if t_max < last {
                return Err(load_error("manifest", format!("t_max {t_max} precedes the last timestamp {last}")));
            }
        }
        let with_pose = self.frames.iter().filter(|f| f.gt_pose.is_some()).count();
        if with_pose != 0 && with_pose != self.frames.len() {
            return Err(load_error("manifest", "ground-truth poses must be given for all frames or none"));
        }
        Ok(())
    }
}

fn load_error(context: &str, reason: impl Into<String>) -> Error {
    Error::Load {
        context: context.to_string(),
        reason: reason.into(),
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn open_image(path: &Path, context: &str) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(load_error(context, format!("missing file {}", path.display())));
    }
    image::open(path).map_err(|e| load_error(context, format!("{}: {e}", path.display())))
}

fn check_size(context: &str, what: &str, got: (u32, u32), k: &ManifestIntrinsics) -> Result<()> {
    if got != (k.width as u32, k.height as u32) {
        return Err(load_error(
            context,
            format!("{what} is {}×{}, manifest says {}×{}", got.0, got.1, k.width, k.height),
        ));
    }
    Ok(())
}

/// Loads every frame listed in the manifest at `path`.
///
/// RGB is scaled to `[0, 1]`, depth divided by the depth scale (0 stays
/// invalid), masks thresholded at 128. A `downsample` factor above 1
/// box-filters every image by that factor and scales the intrinsics.
pub fn load_sequence(path: impl AsRef<Path>, downsample: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let manifest = DatasetManifest::from_path(path)?;
    manifest.validate()?;
    if downsample == 0 {
        return Err(Error::invalid("downsample factor must be >= 1"));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let k = manifest.intrinsics;
    let intrinsics = CameraIntrinsics::new(k.fx, k.fy, k.cx, k.cy, k.width, k.height)?;
    let target = intrinsics.downsampled(downsample);
    if target.width == 0 || target.height == 0 {
        return Err(Error::invalid("downsample factor exceeds the image size"));
    }

    let frames = manifest
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, record)| {
            let context = format!("frame {i}");
            let rgb = open_image(&resolve(base, &record.rgb), &context)?.to_rgb8();
            check_size(&context, "rgb", rgb.dimensions(), &k)?;
            let depth = open_image(&resolve(base, &record.depth), &context)?.to_luma16();
            check_size(&context, "depth", depth.dimensions(), &k)?;
            let mask = match &record.mask {
                Some(p) => {
                    let m = open_image(&resolve(base, p), &context)?.to_luma8();
                    check_size(&context, "mask", m.dimensions(), &k)?;
                    Some(m)
                }
                None => None,
            };
            let color = ColorImage::from_fn(k.width, k.height, |x, y| {
                let p = rgb.get_pixel(x as u32, y as u32).0;
                Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64) / 255.0
            });
            let depth = ScalarImage::from_fn(k.width, k.height, |x, y| {
                depth.get_pixel(x as u32, y as u32).0[0] as f64 / manifest.depth_scale
            });
            let mask = mask.map(|m| Mask::from_fn(k.width, k.height, |x, y| m.get_pixel(x as u32, y as u32).0[0] >= MASK_THRESHOLD));
            let (color, depth, mask) = if downsample > 1 {
                let mask = mask.unwrap_or_else(|| Mask::full(k.width, k.height));
                let (c, d, m) = downsample_frame(&color, &depth, &mask, downsample, target.width, target.height);
                (c, d, Some(m))
            } else {
                (color, depth, mask)
            };
            FrameObservation::new(record.timestamp, color, depth, mask, target)
                .map_err(|e| load_error(&context, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;

    let gt_poses = if manifest.frames[0].gt_pose.is_some() {
        let poses = manifest
            .frames
            .iter()
            .enumerate()
            .map(|(i, f)| {
                Se3Pose::from_row_major(f.gt_pose.as_deref().unwrap_or_default())
                    .map_err(|e| load_error(&format!("frame {i}"), e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Some(poses)
    } else {
        None
    };
    Dataset::new(frames, gt_poses)
}

/// Box filter by `f`: colors average over the block; depth averages the
/// valid readings when at least half the block is valid; a pixel is tissue
/// when at least half its block is.
fn downsample_frame(
    color: &ColorImage,
    depth: &ScalarImage,
    mask: &Mask,
    f: usize,
    width: usize,
    height: usize,
) -> (ColorImage, ScalarImage, Mask) {
    let area = (f * f) as f64;
    let block = |x: usize, y: usize| (0..f).flat_map(move |dy| (0..f).map(move |dx| (y * f + dy) * color.width + x * f + dx));
    let c = ColorImage::from_fn(width, height, |x, y| block(x, y).map(|i| color.data[i]).sum::<Vector3<f64>>() / area);
    let d = ScalarImage::from_fn(width, height, |x, y| {
        let valid: Vec<f64> = block(x, y).map(|i| depth.data[i]).filter(|&v| v > 0.0).collect();
        if 2 * valid.len() >= f * f {
            valid.iter().sum::<f64>() / valid.len() as f64
        } else {
            0.0
        }
    });
    let m = Mask::from_fn(width, height, |x, y| 2 * block(x, y).filter(|&i| mask.data[i]).count() >= f * f);
    (c, d, m)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `dataset` as PNG frames plus `manifest.json` under `dir` and
/// returns the manifest path. Masks are written only when some pixel is
/// excluded.
pub fn write_sequence(dataset: &Dataset, dir: impl AsRef<Path>, depth_scale: f64) -> Result<PathBuf> {
    dataset.validate()?;
    if !(depth_scale.is_finite() && depth_scale > 0.0) {
        return Err(Error::invalid("depth scale must be positive"));
    }
    let dir = dir.as_ref();
    for sub in ["rgb", "depth", "mask"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let k = *dataset.intrinsics().expect("validated dataset has frames");
    let records = dataset
        .frames
        .par_iter()
        .enumerate()
        .map(|(i, frame)| {
            let (w, h) = (frame.width() as u32, frame.height() as u32);
            let rgb_rel = PathBuf::from(format!("rgb/{i:06}.png"));
            let depth_rel = PathBuf::from(format!("depth/{i:06}.png"));
            let rgb = RgbImage::from_fn(w, h, |x, y| {
                let c = frame.rgb.get(x as usize, y as usize);
                Rgb([to_u8(c.x), to_u8(c.y), to_u8(c.z)])
            });
            let mut overflow = false;
            let depth: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w, h, |x, y| {
                let v = (frame.depth.get(x as usize, y as usize) * depth_scale).round();
                overflow |= v > u16::MAX as f64;
                Luma([v.min(u16::MAX as f64) as u16])
            });
            if overflow {
                return Err(Error::invalid(format!("frame {i}: depth exceeds the 16-bit range at scale {depth_scale}")));
            }
            save_png(&rgb, &dir.join(&rgb_rel))?;
            save_png(&depth, &dir.join(&depth_rel))?;
            let mask = if frame.instrument_mask.data.iter().all(|&m| m) {
                None
            } else {
                let rel = PathBuf::from(format!("mask/{i:06}.png"));
                let img = GrayImage::from_fn(w, h, |x, y| Luma([if frame.instrument_mask.get(x as usize, y as usize) { 255 } else { 0 }]));
                save_png(&img, &dir.join(&rel))?;
                Some(rel)
            };
            Ok(FrameRecord {
                timestamp: frame.timestamp,
                rgb: rgb_rel,
                depth: depth_rel,
                mask,
                gt_pose: dataset.gt_poses.as_ref().map(|p| p[i].to_row_major().to_vec()),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest {
        intrinsics: ManifestIntrinsics::from(&k),
        depth_scale,
        t_max: dataset.frames.last().map(|f| f.timestamp),
        frames: records,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Writes an RGB image in `[0, 1]` as an 8-bit PNG.
pub fn save_color_png(img: &ColorImage, path: impl AsRef<Path>) -> Result<()> {
    let out = RgbImage::from_fn(img.width as u32, img.height as u32, |x, y| {
        let c = img.get(x as usize, y as usize);
        Rgb([to_u8(c.x), to_u8(c.y), to_u8(c.z)])
    });
    save_png(&out, path.as_ref())
}

fn save_png<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset(n: usize, w: usize, h: usize) -> Dataset {
        let k = CameraIntrinsics::new(500.0, 500.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap();
        let frames = (0..n)
            .map(|i| {
                let rgb = ColorImage::from_fn(w, h, |x, y| Vector3::new(x as f64 / w as f64, y as f64 / h as f64, 0.5));
                let depth = ScalarImage::from_fn(w, h, |x, _| if x == 0 { 0.0 } else { 5.0 });
                FrameObservation::new(i as f64 * 0.1, rgb, depth, None, k).unwrap()
            })
            .collect();
        Dataset::new(frames, None).unwrap()
    }

    #[test]
    fn depth_is_divided_by_scale() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_sequence(&tiny_dataset(2, 8, 6), dir.path(), 1000.0).unwrap();
        let raw = image::open(dir.path().join("depth/000000.png")).unwrap().to_luma16();
        assert_eq!(raw.get_pixel(3, 3).0[0], 5000);
        let loaded = load_sequence(&path, 1).unwrap();
        assert_eq!(loaded.frames[0].depth.get(3, 3), 5.0);
        assert_eq!(loaded.frames[0].depth.get(0, 3), 0.0);
    }

    #[test]
    fn empty_manifest_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.json");
        fs::write(&path, r#"{"intrinsics":{"fx":1,"fy":1,"cx":0,"cy":0,"width":4,"height":4},"frames":[]}"#).unwrap();
        assert!(matches!(load_sequence(&path, 1), Err(Error::EmptyDataset)));
    }

    #[test]
    fn downsampling_scales_intrinsics() {
        let k = CameraIntrinsics::new(500.0, 500.0, 320.0, 256.0, 640, 512).unwrap();
        let d = k.downsampled(2);
        assert_eq!((d.width, d.height, d.fx, d.fy), (320, 256, 250.0, 250.0));
    }

    #[test]
    fn downsampled_load_averages_blocks() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_sequence(&tiny_dataset(1, 8, 6), dir.path(), 1000.0).unwrap();
        let loaded = load_sequence(&path, 2).unwrap();
        let f = &loaded.frames[0];
        assert_eq!((f.width(), f.height()), (4, 3));
        assert_eq!(f.intrinsics.fx, 250.0);
        // Column 0 is invalid in half of the first block: still averaged.
        assert_eq!(f.depth.get(0, 0), 5.0);
        assert!(f.instrument_mask.data.iter().all(|&m| m));
    }

    #[test]
    fn load_errors_name_the_frame() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_sequence(&tiny_dataset(3, 8, 6), dir.path(), 1000.0).unwrap();
        fs::remove_file(dir.path().join("rgb/000001.png")).unwrap();
        let err = load_sequence(&path, 1).unwrap_err().to_string();
        assert!(err.contains("frame 1"), "{err}");
    }

    #[test]
    fn non_monotone_timestamps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_sequence(&tiny_dataset(2, 8, 6), dir.path(), 1000.0).unwrap();
        let mut m = DatasetManifest::from_path(&path).unwrap();
        m.frames[1].timestamp = 0.0;
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_sequence(&path, 1).unwrap_err().to_string();
        assert!(err.contains("frame 1"), "{err}");
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_sequence(&tiny_dataset(1, 8, 6), dir.path(), 1000.0).unwrap();
        RgbImage::new(4, 4).save(dir.path().join("rgb/000000.png")).unwrap();
        let err = load_sequence(&path, 1).unwrap_err().to_string();
        assert!(err.contains("frame 0") && err.contains("rgb"), "{err}");
    }
}
