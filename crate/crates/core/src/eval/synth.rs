//! Ground-truth dynamic scenes: a textured, gently undulating surface that
//! "breathes" along its normals, observed by a camera moving on an arc
//! while looking at a fixed target.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffer::{ColorImage, ScalarImage};
use crate::error::{Error, Result};
use crate::frame::{Dataset, FrameObservation};
use crate::pose::Se3Pose;
use crate::raster::render_reference;
use crate::scene::{color_to_sh, logit, rotation_to_quat, CameraIntrinsics, GaussianCloud};

use super::Trajectory;

/// Height field `z = amplitude·sin(2πf·x)·sin(2πf·y)` over a
/// `width × height` rectangle centered on the origin of the world x-y plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurfaceSpec {
    pub width: f64,
    pub height: f64,
    pub amplitude: f64,
    /// Spatial frequency in cycles per meter.
    pub frequency: f64,
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        Self {
            width: 0.09,
            height: 0.065,
            amplitude: 0.002,
            frequency: 15.0,
        }
    }
}

/// Displacement `A·sin(2πf·t + φ)` along each point's surface normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BreathingSpec {
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
}

impl Default for BreathingSpec {
    fn default() -> Self {
        Self {
            amplitude: 0.0,
            frequency: 0.25,
            phase: 0.0,
        }
    }
}

impl BreathingSpec {
    pub fn displacement(&self, t: f64) -> f64 {
        self.amplitude * (2.0 * PI * self.frequency * t + self.phase).sin()
    }
}

/// Camera centers on a circular arc of `radius` around `center` in the
/// world x-z plane, sweeping `angular_span` radians symmetrically about the
/// +z axis, with the optical axis aimed at `target`.
///
/// The default arc is a shallow sweep 5 cm above the surface around a point
/// 25 cm below it, which the camera also looks at: mostly lateral motion
/// with a slow turn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    pub radius: f64,
    pub angular_span: f64,
    pub center: [f64; 3],
    pub target: [f64; 3],
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            radius: 0.3,
            angular_span: 0.1,
            center: [0.0, 0.0, -0.25],
            target: [0.0, 0.0, -0.25],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Standard deviation of additive depth noise in meters.
    pub depth_sigma: f64,
    /// Standard deviation of additive color noise.
    pub color_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub gaussian_count: usize,
    pub surface: SurfaceSpec,
    pub breathing: BreathingSpec,
    pub trajectory: TrajectorySpec,
    pub frame_count: usize,
    /// Frames per second; frame `i` has timestamp `i / frame_rate`.
    pub frame_rate: f64,
    pub intrinsics: CameraIntrinsics,
    pub noise: NoiseSpec,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            gaussian_count: 6000,
            surface: SurfaceSpec::default(),
            breathing: BreathingSpec::default(),
            trajectory: TrajectorySpec::default(),
            frame_count: 100,
            frame_rate: 10.0,
            intrinsics: CameraIntrinsics {
                fx: 64.0,
                fy: 64.0,
                cx: 31.5,
                cy: 31.5,
                width: 64,
                height: 64,
                near: 0.01,
            },
            noise: NoiseSpec::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        if self.frame_count == 0 {
            return Err(Error::invalid("frame count must be >= 1"));
        }
        if self.gaussian_count == 0 {
            return Err(Error::invalid("gaussian count must be >= 1"));
        }
        let non_negative = [
            self.surface.amplitude,
            self.surface.frequency,
            self.breathing.amplitude,
            self.breathing.frequency,
            self.noise.depth_sigma,
            self.noise.color_sigma,
            self.trajectory.angular_span,
        ];
        if non_negative.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::invalid("amplitudes, frequencies and noise levels must be >= 0"));
        }
        let positive = [self.surface.width, self.surface.height, self.trajectory.radius, self.frame_rate];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("surface size, arc radius and frame rate must be positive"));
        }
        Ok(())
    }

    pub fn timestamp(&self, frame: usize) -> f64 {
        frame as f64 / self.frame_rate
    }

    /// Arc angle of frame `i`.
    pub fn arc_angle(&self, frame: usize) -> f64 {
        let span = self.trajectory.angular_span;
        if self.frame_count < 2 {
            return -0.5 * span;
        }
        -0.5 * span + span * frame as f64 / (self.frame_count - 1) as f64
    }

    /// World-to-camera pose of frame `i`.
    pub fn camera_pose(&self, frame: usize) -> Se3Pose {
        let th = self.arc_angle(frame);
        let target = Vector3::from(self.trajectory.target);
        let center = Vector3::from(self.trajectory.center) + Vector3::new(th.sin(), 0.0, th.cos()) * self.trajectory.radius;
        look_at(&center, &target)
    }
}

/// World-to-camera pose of a camera at `center` looking at `target`, with
/// image rows running along world -y.
pub fn look_at(center: &Vector3<f64>, target: &Vector3<f64>) -> Se3Pose {
    let z = (target - center).normalize();
    let down = Vector3::new(0.0, -1.0, 0.0);
    let x = down.cross(&z).normalize();
    let y = z.cross(&x);
    let cam_to_world = Matrix3::from_columns(&[x, y, z]);
    let r = cam_to_world.transpose();
    Se3Pose::new(r, -(r * center))
}

/// Output of [`generate_sequence`].
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSequence {
    pub config: SynthConfig,
    pub dataset: Dataset,
    /// Canonical (undisplaced) ground-truth cloud.
    pub cloud: GaussianCloud,
    /// Unit surface normal of every ground-truth Gaussian.
    pub normals: Vec<Vector3<f64>>,
}

impl SyntheticSequence {
    /// Ground-truth cloud at time `t`.
    pub fn cloud_at(&self, t: f64) -> GaussianCloud {
        displaced(&self.cloud, &self.normals, self.config.breathing.displacement(t))
    }

    pub fn gt_trajectory(&self) -> Trajectory {
        let poses = self.dataset.gt_poses.as_ref().expect("synthetic sequences carry ground truth");
        Trajectory::from_entries(
            self.dataset
                .frames
                .iter()
                .zip(poses)
                .map(|(f, p)| (f.timestamp, *p))
                .collect(),
        )
        .expect("synthetic timestamps increase")
    }
}

fn displaced(cloud: &GaussianCloud, normals: &[Vector3<f64>], offset: f64) -> GaussianCloud {
    let mut out = cloud.clone();
    if offset != 0.0 {
        for (p, n) in out.positions.iter_mut().zip(normals) {
            *p += n * offset;
        }
    }
    out
}

fn surface_height(s: &SurfaceSpec, x: f64, y: f64) -> (f64, Vector3<f64>) {
    let w = 2.0 * PI * s.frequency;
    let h = s.amplitude * (w * x).sin() * (w * y).sin();
    let hx = s.amplitude * w * (w * x).cos() * (w * y).sin();
    let hy = s.amplitude * w * (w * x).sin() * (w * y).cos();
    (h, Vector3::new(-hx, -hy, 1.0).normalize())
}

/// Smooth tissue-like texture: a few oriented sinusoids with seeded phases.
struct Texture {
    waves: Vec<(Vector3<f64>, f64, f64, f64)>,
}

impl Texture {
    fn new(rng: &mut ChaCha8Rng) -> Self {
        let waves = (0..6)
            .map(|i| {
                let angle = rng.random_range(0.0..PI);
                let freq = 40.0 + 25.0 * i as f64 + rng.random_range(0.0..10.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let weights = Vector3::new(
                    rng.random_range(0.5..1.0),
                    rng.random_range(0.3..1.0),
                    rng.random_range(0.2..0.8),
                );
                (weights, angle, freq, phase)
            })
            .collect();
        Self { waves }
    }

    fn color(&self, x: f64, y: f64) -> Vector3<f64> {
        let mut v = Vector3::zeros();
        for (weights, angle, freq, phase) in &self.waves {
            let u = x * angle.cos() + y * angle.sin();
            v += weights * (2.0 * PI * freq * u + phase).sin();
        }
        let base = Vector3::new(0.62, 0.38, 0.34);
        let spread = Vector3::new(0.09, 0.07, 0.06);
        (base + v.component_mul(&spread)).map(|c| c.clamp(0.02, 0.98))
    }
}

fn build_cloud(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> (GaussianCloud, Vec<Vector3<f64>>) {
    let s = &cfg.surface;
    let aspect = s.width / s.height;
    let nx = ((cfg.gaussian_count as f64 * aspect).sqrt().round() as usize).max(1);
    let ny = (cfg.gaussian_count / nx).max(1);
    let spacing = (s.width / nx as f64).max(s.height / ny as f64);
    let texture = Texture::new(rng);
    let mut cloud = GaussianCloud::new();
    let mut normals = Vec::with_capacity(nx * ny);
    let log_scale = Vector3::new(0.7 * spacing, 0.7 * spacing, 0.1 * spacing).map(f64::ln);
    for iy in 0..ny {
        for ix in 0..nx {
            let x = -0.5 * s.width + (ix as f64 + 0.5) * s.width / nx as f64;
            let y = -0.5 * s.height + (iy as f64 + 0.5) * s.height / ny as f64;
            let (z, n) = surface_height(s, x, y);
            let t1 = (Vector3::x() - n * n.x).normalize();
            let t2 = n.cross(&t1);
            let q = rotation_to_quat(&Matrix3::from_columns(&[t1, t2, n]));
            cloud.push(Vector3::new(x, y, z), log_scale, q, color_to_sh(&texture.color(x, y)), logit(0.98));
            normals.push(n);
        }
    }
    (cloud, normals)
}

/// Renders every frame of the configured scene with the reference renderer.
///
/// Depth is the alpha-normalized rendered depth where the accumulated alpha is
/// at least 0.5 and 0 (invalid) elsewhere. Noise streams are seeded per frame,
/// so the output does not depend on thread scheduling.
pub fn generate_sequence(cfg: &SynthConfig) -> Result<SyntheticSequence> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (cloud, normals) = build_cloud(cfg, &mut rng);
    let k = cfg.intrinsics;
    let frames: Vec<(FrameObservation, Se3Pose)> = (0..cfg.frame_count)
        .into_par_iter()
        .map(|i| {
            let t = cfg.timestamp(i);
            let pose = cfg.camera_pose(i);
            let scene = displaced(&cloud, &normals, cfg.breathing.displacement(t));
            let out = render_reference(&scene, &pose, &k);
            let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed);
            noise.set_stream(i as u64 + 1);
            let color_noise = Normal::new(0.0, cfg.noise.color_sigma.max(f64::MIN_POSITIVE)).unwrap();
            let depth_noise = Normal::new(0.0, cfg.noise.depth_sigma.max(f64::MIN_POSITIVE)).unwrap();
            let mut rgb = ColorImage::zeros(k.width, k.height);
            let mut depth = ScalarImage::zeros(k.width, k.height);
            for p in 0..k.pixel_count() {
                let mut c = out.color.data[p];
                if cfg.noise.color_sigma > 0.0 {
                    c = c.map(|v| (v + color_noise.sample(&mut noise)).clamp(0.0, 1.0));
                }
                rgb.data[p] = c;
                let a = out.alpha.data[p];
                if a >= 0.5 {
                    let mut d = out.depth.data[p] / a;
                    if cfg.noise.depth_sigma > 0.0 {
                        d += depth_noise.sample(&mut noise);
                    }
                    depth.data[p] = d.max(0.0);
                }
            }
            let frame = FrameObservation::new(t, rgb, depth, None, k).expect("generated frame is consistent");
            (frame, pose)
        })
        .collect();
    let (frames, poses): (Vec<_>, Vec<_>) = frames.into_iter().unzip();
    let dataset = Dataset::new(frames, Some(poses))?;
    Ok(SyntheticSequence {
        config: cfg.clone(),
        dataset,
        cloud,
        normals,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn small() -> SynthConfig {
        SynthConfig {
            gaussian_count: 1200,
            frame_count: 4,
            intrinsics: CameraIntrinsics::new(24.0, 24.0, 11.5, 11.5, 24, 24).unwrap(),
            ..SynthConfig::default()
        }
    }

    #[test]
    fn look_at_points_the_optical_axis_at_the_target() {
        let c = Vector3::new(0.01, 0.0, 0.05);
        let target = Vector3::new(0.0, 0.002, 0.0);
        let pose = look_at(&c, &target);
        assert!(pose.is_valid(1e-12));
        let p = pose.transform_point(&target);
        assert_abs_diff_eq!(p.x, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.y, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.z, (target - c).norm(), epsilon = 1e-15);
        assert_abs_diff_eq!(pose.inverse().translation, c, epsilon = 1e-15);
    }

    #[test]
    fn static_scene_frames_depend_only_on_pose() {
        let cfg = SynthConfig {
            trajectory: TrajectorySpec {
                angular_span: 0.0,
                ..TrajectorySpec::default()
            },
            ..small()
        };
        let seq = generate_sequence(&cfg).unwrap();
        let f = &seq.dataset.frames;
        assert_eq!(f[0].rgb, f[3].rgb);
        assert_eq!(f[0].depth, f[3].depth);
        assert_eq!(seq.dataset.gt_poses.as_ref().unwrap()[0], cfg.camera_pose(0));
    }

    #[test]
    fn generation_is_deterministic_and_depth_tracks_alpha() {
        let cfg = SynthConfig {
            breathing: BreathingSpec {
                amplitude: 0.001,
                ..BreathingSpec::default()
            },
            noise: NoiseSpec {
                depth_sigma: 1e-4,
                color_sigma: 0.01,
            },
            ..small()
        };
        let a = generate_sequence(&cfg).unwrap();
        let b = generate_sequence(&cfg).unwrap();
        assert_eq!(a, b);
        for (i, f) in a.dataset.frames.iter().enumerate() {
            let alpha = render_reference(&a.cloud_at(f.timestamp), &a.config.camera_pose(i), &f.intrinsics).alpha;
            for p in 0..alpha.data.len() {
                assert_eq!(alpha.data[p] < 0.5, f.depth.data[p] == 0.0);
            }
        }
        assert_ne!(a.dataset.frames[0].rgb, a.dataset.frames[1].rgb);
    }

    #[test]
    fn default_views_are_fully_covered() {
        let cfg = SynthConfig {
            frame_count: 3,
            ..SynthConfig::default()
        };
        let seq = generate_sequence(&cfg).unwrap();
        for f in &seq.dataset.frames {
            let valid = f.depth.data.iter().filter(|&&d| d > 0.0).count();
            assert_eq!(valid, f.depth.data.len());
        }
    }
}
