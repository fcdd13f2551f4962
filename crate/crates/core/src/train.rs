//! Frame-by-frame reconstruction: pose extrapolation, joint pose/deformation
//! learning, scene expansion and retrospective learning, with the sequence
//! split into fixed-length model segments.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::buffer::Mask;
use crate::deform::{active_indices, apply_deformation, deformation_backward, ActiveSet, DeformationGradients, DeformationParams};
use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::frame::{Dataset, FrameObservation};
use crate::loss::{movement_regularizer, photometric_loss};
use crate::optim::{AdamConfig, AdamState};
use crate::param::{
    compute_expansion_mask, expand_scene, parameterize_frame, refine_parameters, ExpansionOptions, ParamDefaults,
    RefineConfig,
};
use crate::pose::{apply_pose_update, extrapolate_pose, PoseHistory, Se3Pose, TangentVector};
use crate::raster::{render, render_backward, RenderOutput};
use crate::scene::{transform_cloud, CameraIntrinsics, GaussianCloud};

/// Hyperparameters of the reconstruction loop.
///
/// Scene geometry is in meters, but the depth-loss weights, the movement
/// regularizer and the translation learning rate are expressed in
/// `loss_units_per_meter` units (millimeters by default), the scale at which
/// the default weights and rates are balanced against the color term and the
/// rotation rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Joint-learning iterations per frame (K).
    pub joint_iterations: usize,
    /// Retrospective samples per frame.
    pub retro_count: usize,
    /// Retrospective window width in frames (ω).
    pub retro_window: usize,
    /// Frames per model segment (κ).
    pub segment_length: usize,
    /// Accumulated-alpha threshold below which a pixel counts as unseen (δ).
    pub expansion_threshold: f64,
    /// Minimum fraction of unseen pixels that triggers an expansion.
    pub expansion_min_fraction: f64,
    pub depth_weight_init: f64,
    pub depth_weight_joint: f64,
    pub depth_weight_retro: f64,
    /// Weight of the mean-displacement regularizer during joint learning.
    pub movement_weight: f64,
    pub lr_deformation: f64,
    /// Radians per step.
    pub lr_rotation: f64,
    /// Loss units per step.
    pub lr_translation: f64,
    /// Length unit of the depth loss and translation rate, per meter.
    pub loss_units_per_meter: f64,
    /// Basis functions per Gaussian (B).
    pub basis_count: usize,
    /// Half-width of the partial-activation window in bases (m).
    pub active_half_width: usize,
    /// Pose-extrapolation window (L).
    pub velocity_window: usize,
    /// Pixel stride of Gaussian generation.
    pub stride: usize,
    pub seed: u64,
    /// Optimize pose and deformation together; otherwise pose first, then
    /// deformation, each for `joint_iterations` steps.
    pub joint: bool,
    pub retro: bool,
    /// Update every basis instead of the temporally active subset.
    pub full_activation: bool,
    /// Fit generated Gaussians to their source frame before insertion.
    pub refine: bool,
    pub refine_iterations: usize,
    /// Recompute the unseen-region mask at every joint iteration.
    pub refresh_expansion_mask: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            joint_iterations: 10,
            retro_count: 40,
            retro_window: 100,
            segment_length: 100,
            expansion_threshold: 0.8,
            expansion_min_fraction: 0.002,
            depth_weight_init: 0.002,
            depth_weight_joint: 0.002,
            depth_weight_retro: 0.002,
            movement_weight: 0.01,
            lr_deformation: 1.6e-4,
            lr_rotation: 1e-3,
            lr_translation: 0.05,
            loss_units_per_meter: 1000.0,
            basis_count: 20,
            active_half_width: 4,
            velocity_window: 3,
            stride: 4,
            seed: 0,
            joint: true,
            retro: true,
            full_activation: false,
            refine: true,
            refine_iterations: 20,
            refresh_expansion_mask: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("joint_iterations", self.joint_iterations),
            ("retro_window", self.retro_window),
            ("segment_length", self.segment_length),
            ("active_half_width", self.active_half_width),
            ("velocity_window", self.velocity_window),
            ("stride", self.stride),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be >= 1")));
            }
        }
        if self.basis_count < 2 {
            return Err(Error::invalid("basis_count must be >= 2"));
        }
        let positive = [
            ("lr_deformation", self.lr_deformation),
            ("lr_rotation", self.lr_rotation),
            ("lr_translation", self.lr_translation),
            ("expansion_threshold", self.expansion_threshold),
            ("loss_units_per_meter", self.loss_units_per_meter),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        let non_negative = [
            ("expansion_min_fraction", self.expansion_min_fraction),
            ("depth_weight_init", self.depth_weight_init),
            ("depth_weight_joint", self.depth_weight_joint),
            ("depth_weight_retro", self.depth_weight_retro),
            ("movement_weight", self.movement_weight),
        ];
        for (name, v) in non_negative {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    /// Depth weights in per-meter form, as used by the loss functions.
    fn depth_weight(&self, weight: f64) -> f64 {
        weight * self.loss_units_per_meter
    }

    /// Translation step in meters.
    /// Movement-regularizer weight for displacements measured in meters: the
    /// regularizer is quadratic in length, so it scales with units².
    fn movement_scale(&self) -> f64 {
        self.movement_weight * self.loss_units_per_meter * self.loss_units_per_meter
    }

    fn translation_step(&self) -> f64 {
        self.lr_translation / self.loss_units_per_meter
    }

    fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            depth_weight: self.depth_weight(self.depth_weight_init),
            ..RefineConfig::default()
        }
    }

    pub fn expansion_options(&self) -> ExpansionOptions {
        ExpansionOptions {
            stride: self.stride,
            defaults: ParamDefaults::default(),
            refine_iterations: if self.refine { self.refine_iterations } else { 0 },
            refine: self.refine_config(),
        }
    }
}

/// Offsets of the three position weights within one basis' parameters.
const POSITION_WEIGHTS: std::ops::Range<usize> = 2..5;

/// Largest distance of a Gaussian from the cloud's centroid (1 m for an
/// empty cloud, so learning rates stay well defined).
fn cloud_radius(cloud: &GaussianCloud) -> f64 {
    if cloud.is_empty() {
        return 1.0;
    }
    let centroid = cloud.positions.iter().sum::<Vector3<f64>>() / cloud.len() as f64;
    let r = cloud.positions.iter().map(|p| (p - centroid).norm()).fold(0.0, f64::max);
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

/// One model of the multi-model representation: a canonical cloud with its
/// deformation curves, covering a contiguous block of frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSegment {
    pub cloud: GaussianCloud,
    /// Frame indices `[start, end)`; `end` grows as frames are processed.
    pub frame_range: (usize, usize),
    /// Time span `[first, last]` the segment is responsible for. Segment-local
    /// deformation time is `t - t_range.0`.
    pub t_range: (f64, f64),
    /// Adam moments of the deformation parameters.
    pub optimizer: AdamState,
    /// Radius of the seeding cloud around its centroid, in meters. Position
    /// deformation weights step at `lr_deformation` times this length.
    pub extent: f64,
}

impl ModelSegment {
    /// Starts a segment from Gaussians already in world coordinates.
    pub fn new(cloud: &GaussianCloud, start: usize, t_range: (f64, f64), basis_count: usize) -> Result<Self> {
        let span = t_range.1 - t_range.0;
        let t_max = if span > 0.0 { span } else { 1.0 };
        let mut seeded = GaussianCloud::with_deformation(DeformationParams::new(0, basis_count, t_max)?);
        seeded.merge_fresh(cloud);
        let optimizer = AdamState::new(seeded.deformation.as_slice().len());
        let extent = cloud_radius(&seeded);
        Ok(Self {
            cloud: seeded,
            frame_range: (start, start + 1),
            t_range,
            optimizer,
            extent,
        })
    }

    pub fn local_time(&self, t: f64) -> f64 {
        t - self.t_range.0
    }

    pub fn contains_frame(&self, i: usize) -> bool {
        (self.frame_range.0..self.frame_range.1).contains(&i)
    }

    /// The cloud deformed to absolute time `t`.
    pub fn deformed(&self, t: f64) -> GaussianCloud {
        apply_deformation(&self.cloud, self.local_time(t))
    }

    pub fn render(&self, t: f64, pose: &Se3Pose, k: &CameraIntrinsics) -> RenderOutput {
        render(&self.deformed(t), pose, k)
    }

    fn active_set(&self, t_local: f64, config: &TrainConfig) -> ActiveSet {
        let d = &self.cloud.deformation;
        if config.full_activation {
            ActiveSet::all(d.basis_count())
        } else {
            active_indices(t_local, d.basis_count(), config.active_half_width, d.t_max())
        }
    }

    fn sync_optimizer(&mut self) {
        self.optimizer.resize(self.cloud.deformation.as_slice().len());
    }

    /// Sparse Adam step on the active bases; returns the number of scalar
    /// parameters updated.
    fn step_deformation(&mut self, grads: &DeformationGradients, lr: f64) -> u64 {
        let adam = AdamConfig::default();
        let position_lr = lr * self.extent;
        let count = self.cloud.len();
        let per_basis = crate::deform::PARAMS_PER_BASIS;
        let params = &self.cloud.deformation;
        let offsets: Vec<(usize, usize)> = (0..count)
            .flat_map(|n| {
                grads
                    .active
                    .indices
                    .iter()
                    .enumerate()
                    .map(move |(k, &j)| (grads.offset(n, k), params.offset(n, j)))
            })
            .collect();
        let slice = self.cloud.deformation.as_mut_slice();
        for &(src, dst) in &offsets {
            for p in 0..per_basis {
                let lr = if POSITION_WEIGHTS.contains(&p) { position_lr } else { lr };
                self.optimizer
                    .update(&adam, dst + p, &mut slice[dst + p], grads.values[src + p], lr);
            }
        }
        (offsets.len() * per_basis) as u64
    }
}

/// What the joint-learning loop optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointMode {
    Joint,
    PoseOnly,
    DeformationOnly,
}

impl JointMode {
    fn pose(self) -> bool {
        matches!(self, JointMode::Joint | JointMode::PoseOnly)
    }

    fn deformation(self) -> bool {
        matches!(self, JointMode::Joint | JointMode::DeformationOnly)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointOutcome {
    pub pose: Se3Pose,
    /// Loss before each iteration's update.
    pub losses: Vec<f64>,
    /// Loss after the last update.
    pub final_loss: f64,
    pub deformation_updates: u64,
}

fn joint_loss(
    segment: &ModelSegment,
    frame: &FrameObservation,
    pose: &Se3Pose,
    mask: Option<&Mask>,
    config: &TrainConfig,
) -> Result<(GaussianCloud, Mask, crate::loss::PhotometricLoss, f64, Vector3<f64>)> {
    let t = segment.local_time(frame.timestamp);
    let deformed = apply_deformation(&segment.cloud, t);
    let out = render(&deformed, pose, &frame.intrinsics);
    let covered = match mask {
        Some(m) => m.clone(),
        None => frame
            .instrument_mask
            .and_not(&compute_expansion_mask(&out.alpha, config.expansion_threshold)),
    };
    let loss = photometric_loss(&out, frame, &covered, config.depth_weight(config.depth_weight_joint))?;
    let (reg, reg_grad) = movement_regularizer(&segment.cloud, t);
    Ok((deformed, covered, loss, reg, reg_grad))
}

/// Refines the pose of `frame` starting from `initial` and, depending on
/// `mode`, the active deformation parameters of `segment`, by minimizing the
/// photometric loss over covered tissue pixels plus the movement
/// regularizer.
pub fn joint_learning(
    frame: &FrameObservation,
    segment: &mut ModelSegment,
    initial: &Se3Pose,
    config: &TrainConfig,
    mode: JointMode,
) -> Result<JointOutcome> {
    let adam = AdamConfig::default();
    let mut pose_state = AdamState::new(6);
    let mut xi = TangentVector::zeros();
    let mut pose = *initial;
    let mut losses = Vec::with_capacity(config.joint_iterations);
    let mut updates = 0;
    let t = segment.local_time(frame.timestamp);
    let active = segment.active_set(t, config);
    let mut fixed_mask: Option<Mask> = None;

    for iter in 0..config.joint_iterations {
        let (deformed, covered, loss, reg, reg_grad) = joint_loss(segment, frame, &pose, fixed_mask.as_ref(), config)?;
        if !config.refresh_expansion_mask && fixed_mask.is_none() {
            fixed_mask = Some(covered);
        }
        let total = loss.loss + config.movement_scale() * reg;
        if !total.is_finite() {
            return Err(Error::Diverged {
                frame: None,
                iteration: iter,
            });
        }
        losses.push(total);
        let mut grads = render_backward(&deformed, &pose, &frame.intrinsics, &loss.upstream)?;
        if mode.pose() {
            let g = grads.pose;
            let mut step = xi;
            for c in 0..6 {
                let lr = if c < 3 { config.translation_step() } else { config.lr_rotation };
                pose_state.update(&adam, c, &mut step[c], g[c], lr);
            }
            let delta = step - xi;
            xi = step;
            pose = apply_pose_update(&pose, &delta);
        }
        if mode.deformation() && !segment.cloud.deformation.is_static() {
            if config.movement_weight > 0.0 && reg_grad != Vector3::zeros() {
                let extra = reg_grad * config.movement_scale();
                for g in &mut grads.gaussians.positions {
                    *g += extra;
                }
            }
            let dgrads = deformation_backward(&segment.cloud, t, &grads.gaussians, &active)?;
            updates += segment.step_deformation(&dgrads, config.lr_deformation);
        }
    }
    let (_, _, loss, reg, _) = joint_loss(segment, frame, &pose, fixed_mask.as_ref(), config)?;
    let final_loss = loss.loss + config.movement_scale() * reg;
    if !final_loss.is_finite() {
        return Err(Error::Diverged {
            frame: None,
            iteration: config.joint_iterations,
        });
    }
    Ok(JointOutcome {
        pose,
        losses,
        final_loss,
        deformation_updates: updates,
    })
}

/// Uniform retrospective sampler over the frames `[lo, hi]`.
pub fn sample_retro_frames(rng: &mut ChaCha8Rng, lo: usize, hi: usize, count: usize) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(lo..=hi)).collect()
}

/// First frame index of the retrospective window for frame `i`: the `ω` most
/// recent frames including `i`, clamped to the segment start.
pub fn retro_window_start(i: usize, window: usize, segment_start: usize) -> usize {
    (i + 1).saturating_sub(window).max(segment_start)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetroOutcome {
    pub samples: Vec<usize>,
    pub mean_loss: f64,
    pub deformation_updates: u64,
}

/// Replays `retro_count` frames drawn uniformly (with replacement) from the
/// window ending at frame `i`, one deformation-only Adam step each, with the
/// stored poses held fixed.
pub fn retrospective_learning(
    frames: &[FrameObservation],
    trajectory: &[Se3Pose],
    segment: &mut ModelSegment,
    i: usize,
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RetroOutcome> {
    if !segment.contains_frame(i) || i >= trajectory.len() {
        return Err(Error::invalid(format!("frame {i} is not tracked in this segment")));
    }
    let lo = retro_window_start(i, config.retro_window, segment.frame_range.0);
    let samples = sample_retro_frames(rng, lo, i, config.retro_count);
    let mut sum = 0.0;
    let mut updates = 0;
    for (iteration, &j) in samples.iter().enumerate() {
        let frame = &frames[j];
        let t = segment.local_time(frame.timestamp);
        let deformed = apply_deformation(&segment.cloud, t);
        let out = render(&deformed, &trajectory[j], &frame.intrinsics);
        let loss = photometric_loss(&out, frame, &frame.instrument_mask, config.depth_weight(config.depth_weight_retro))?;
        if !loss.loss.is_finite() {
            return Err(Error::Diverged {
                frame: Some(j),
                iteration,
            });
        }
        sum += loss.loss;
        if segment.cloud.deformation.is_static() {
            continue;
        }
        let grads = render_backward(&deformed, &trajectory[j], &frame.intrinsics, &loss.upstream)?;
        let active = segment.active_set(t, config);
        let dgrads = deformation_backward(&segment.cloud, t, &grads.gaussians, &active)?;
        updates += segment.step_deformation(&dgrads, config.lr_deformation);
    }
    let mean_loss = if samples.is_empty() { 0.0 } else { sum / samples.len() as f64 };
    Ok(RetroOutcome {
        samples,
        mean_loss,
        deformation_updates: updates,
    })
}

/// Per-frame summary emitted by [`reconstruct_sequence_with`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameProgress {
    pub frame: usize,
    pub segment: usize,
    pub timestamp: f64,
    pub joint_losses: Vec<f64>,
    pub joint_final_loss: Option<f64>,
    pub retro_mean_loss: Option<f64>,
    pub gaussians_added: usize,
    pub gaussian_count: usize,
    /// World-to-camera pose as a row-major 4×4 matrix.
    pub pose: [f64; 16],
}

/// Everything produced by a reconstruction run.
#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionState {
    pub config: TrainConfig,
    pub intrinsics: CameraIntrinsics,
    pub segments: Vec<ModelSegment>,
    pub trajectory: Trajectory,
    pub history: PoseHistory,
    pub rng: ChaCha8Rng,
    /// Total number of scalar deformation-parameter updates applied.
    pub deformation_updates: u64,
    pub progress: Vec<FrameProgress>,
}

impl ReconstructionState {
    /// Index of the segment responsible for time `t`: the last segment that
    /// starts at or before `t` (the first one for earlier times).
    pub fn segment_for_time(&self, t: f64) -> usize {
        self.segments
            .iter()
            .rposition(|s| s.t_range.0 <= t)
            .unwrap_or(0)
    }

    pub fn render(&self, t: f64, pose: &Se3Pose) -> RenderOutput {
        self.segments[self.segment_for_time(t)].render(t, pose, &self.intrinsics)
    }

    pub fn poses(&self) -> Vec<Se3Pose> {
        self.trajectory.poses().copied().collect()
    }
}

/// [`reconstruct_sequence_with`] without a progress callback.
pub fn reconstruct_sequence(dataset: &Dataset, config: &TrainConfig) -> Result<ReconstructionState> {
    reconstruct_sequence_with(dataset, config, |_| {})
}

fn new_segment(
    frames: &[FrameObservation],
    start: usize,
    pose: &Se3Pose,
    config: &TrainConfig,
) -> Result<ModelSegment> {
    let frame = &frames[start];
    let end = (start + config.segment_length).min(frames.len());
    let t_range = (frame.timestamp, frames[end - 1].timestamp);
    let mut local = parameterize_frame(frame, config.stride, &ParamDefaults::default())?;
    if config.refine && config.refine_iterations > 0 {
        local = refine_parameters(&local, frame, config.refine_iterations, &config.refine_config(), None)?.0;
    }
    let world = transform_cloud(&local, &pose.inverse());
    ModelSegment::new(&world, start, t_range, config.basis_count)
}

/// Runs the full pipeline over `dataset`.
///
/// Frame 0 is placed at its ground-truth pose when the dataset carries one
/// and at the identity otherwise. Every `segment_length` frames a new model
/// segment starts: its first frame is tracked (pose only) against the
/// previous segment and then seeds fresh Gaussians.
pub fn reconstruct_sequence_with(
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_frame: impl FnMut(&FrameProgress),
) -> Result<ReconstructionState> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot reconstruct an empty dataset"));
    }
    config.validate()?;
    dataset.validate()?;
    let frames = &dataset.frames;
    let intrinsics = frames[0].intrinsics;
    let initial = dataset
        .gt_poses
        .as_ref()
        .map(|p| p[0])
        .unwrap_or_else(Se3Pose::identity);

    let mut state = ReconstructionState {
        config: config.clone(),
        intrinsics,
        segments: vec![new_segment(frames, 0, &initial, config)?],
        trajectory: Trajectory::new(),
        history: PoseHistory::for_window(config.velocity_window),
        rng: ChaCha8Rng::seed_from_u64(config.seed),
        deformation_updates: 0,
        progress: Vec::with_capacity(frames.len()),
    };
    let mut poses: Vec<Se3Pose> = Vec::with_capacity(frames.len());
    let options = config.expansion_options();

    for (i, frame) in frames.iter().enumerate() {
        let mut record = FrameProgress {
            frame: i,
            segment: state.segments.len() - 1,
            timestamp: frame.timestamp,
            joint_losses: Vec::new(),
            joint_final_loss: None,
            retro_mean_loss: None,
            gaussians_added: 0,
            gaussian_count: 0,
            pose: [0.0; 16],
        };
        let pose = if i == 0 {
            initial
        } else {
            let predicted = extrapolate_pose(&state.history, config.velocity_window);
            let starts_segment = i - state.segments.last().unwrap().frame_range.0 >= config.segment_length;
            let seg = state.segments.last_mut().unwrap();
            let outcome = if starts_segment {
                joint_learning(frame, seg, &predicted, config, JointMode::PoseOnly)
            } else if config.joint {
                joint_learning(frame, seg, &predicted, config, JointMode::Joint)
            } else {
                joint_learning(frame, seg, &predicted, config, JointMode::PoseOnly).and_then(|first| {
                    let second = joint_learning(frame, seg, &first.pose, config, JointMode::DeformationOnly)?;
                    let mut losses = first.losses;
                    losses.extend(second.losses);
                    Ok(JointOutcome {
                        pose: first.pose,
                        losses,
                        final_loss: second.final_loss,
                        deformation_updates: second.deformation_updates,
                    })
                })
            }
            .map_err(|e| e.with_frame(i))?;
            state.deformation_updates += outcome.deformation_updates;
            record.joint_losses = outcome.losses;
            record.joint_final_loss = Some(outcome.final_loss);
            if starts_segment {
                state.segments.push(new_segment(frames, i, &outcome.pose, config)?);
                record.segment = state.segments.len() - 1;
            } else {
                seg.frame_range.1 = i + 1;
            }
            outcome.pose
        };
        state.history.push(frame.timestamp, pose)?;
        state.trajectory.push(frame.timestamp, pose)?;
        poses.push(pose);

        let seg_start = state.segments.last().unwrap().frame_range.0;
        if i > seg_start {
            let seg = state.segments.last_mut().unwrap();
            let out = seg.render(frame.timestamp, &pose, &intrinsics);
            let unseen = compute_expansion_mask(&out.alpha, config.expansion_threshold).and(&frame.instrument_mask);
            if unseen.fraction() > config.expansion_min_fraction {
                let before = seg.cloud.len();
                // New Gaussians are observed at this frame's time; their
                // canonical position is where they are seen now.
                seg.cloud = expand_scene(&seg.cloud, frame, &unseen, &pose, &options)?;
                seg.sync_optimizer();
                record.gaussians_added = seg.cloud.len() - before;
            }
            if config.retro && config.retro_count > 0 {
                let outcome = retrospective_learning(frames, &poses, seg, i, config, &mut state.rng)
                    .map_err(|e| e.with_frame(i))?;
                state.deformation_updates += outcome.deformation_updates;
                record.retro_mean_loss = Some(outcome.mean_loss);
            }
        }
        record.gaussian_count = state.segments.last().unwrap().cloud.len();
        record.pose = pose.to_row_major();
        on_frame(&record);
        state.progress.push(record);
    }
    Ok(state)
}
