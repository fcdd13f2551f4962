//! Binary checkpoints of a [`ReconstructionState`].
//!
//! Layout (little-endian): magic `DYGS`, format version `u32`, then the
//! training config as length-prefixed JSON, the intrinsics, every segment
//! (frame/time ranges, extent, canonical cloud, deformation curves, Adam moments),
//! the trajectory, the pose history, the RNG state, the update counter and
//! the per-frame progress log as length-prefixed JSON. All learned values are
//! stored as raw `f64` bits, so a roundtrip is exact.

use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Vector3, Vector4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::deform::DeformationParams;
use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::optim::AdamState;
use crate::pose::{PoseHistory, Se3Pose};
use crate::scene::{CameraIntrinsics, GaussianCloud};
use crate::train::{FrameProgress, ModelSegment, ReconstructionState, TrainConfig};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DYGS";
pub const CHECKPOINT_VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64(&mut self, v: f64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn f64s(&mut self, values: impl IntoIterator<Item = f64>) {
        for v in values {
            self.f64(v);
        }
    }

    fn bytes(&mut self, b: &[u8]) {
        self.len(b.len());
        self.buf.extend_from_slice(b);
    }

    fn pose(&mut self, p: &Se3Pose) {
        for r in 0..3 {
            for c in 0..3 {
                self.f64(p.rotation[(r, c)]);
            }
        }
        self.f64s(p.translation.iter().copied());
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.data.len()).ok_or_else(|| {
            Error::CorruptCheckpoint(format!("truncated: needed {n} bytes at offset {}", self.pos))
        })?;
        let out = &self.data[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    /// A count of items of `item_size` bytes each, checked against the
    /// remaining input so corrupt lengths cannot trigger huge allocations.
    fn len(&mut self, item_size: usize) -> Result<usize> {
        let n = self.u64()?;
        let remaining = (self.data.len() - self.pos) as u64;
        if n.saturating_mul(item_size.max(1) as u64) > remaining {
            return Err(Error::CorruptCheckpoint(format!("length {n} exceeds the remaining data")));
        }
        Ok(n as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }

    fn vec3(&mut self) -> Result<Vector3<f64>> {
        Ok(Vector3::new(self.f64()?, self.f64()?, self.f64()?))
    }

    fn pose(&mut self) -> Result<Se3Pose> {
        let r = self.f64s(9)?;
        let t = self.vec3()?;
        Ok(Se3Pose {
            rotation: Matrix3::from_row_slice(&r),
            translation: t,
        })
    }
}

fn write_cloud(w: &mut Writer, cloud: &GaussianCloud) {
    w.len(cloud.len());
    for p in &cloud.positions {
        w.f64s(p.iter().copied());
    }
    for s in &cloud.log_scales {
        w.f64s(s.iter().copied());
    }
    for q in &cloud.rotations {
        w.f64s(q.iter().copied());
    }
    for c in &cloud.sh_colors {
        w.f64s(c.iter().copied());
    }
    w.f64s(cloud.logit_opacities.iter().copied());
    let d = &cloud.deformation;
    w.len(d.len());
    w.len(d.basis_count());
    w.f64(d.t_max());
    w.len(d.as_slice().len());
    w.f64s(d.as_slice().iter().copied());
}

fn read_cloud(r: &mut Reader) -> Result<GaussianCloud> {
    let n = r.len(8 * 14)?;
    let vec3s = |r: &mut Reader| (0..n).map(|_| r.vec3()).collect::<Result<Vec<_>>>();
    let positions = vec3s(r)?;
    let log_scales = vec3s(r)?;
    let rotations = (0..n)
        .map(|_| Ok(Vector4::new(r.f64()?, r.f64()?, r.f64()?, r.f64()?)))
        .collect::<Result<Vec<_>>>()?;
    let sh_colors = vec3s(r)?;
    let logit_opacities = r.f64s(n)?;
    let count = r.u64()? as usize;
    let basis_count = r.u64()? as usize;
    let t_max = r.f64()?;
    let len = r.len(8)?;
    let params = r.f64s(len)?;
    let deformation = DeformationParams::from_raw(count, basis_count, t_max, params)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    let cloud = GaussianCloud {
        positions,
        log_scales,
        rotations,
        sh_colors,
        logit_opacities,
        deformation,
    };
    if cloud.deformation.len() != n {
        return Err(Error::CorruptCheckpoint("deformation count does not match the cloud".into()));
    }
    Ok(cloud)
}

fn write_adam(w: &mut Writer, s: &AdamState) {
    w.len(s.len());
    w.f64s(s.m.iter().copied());
    w.f64s(s.v.iter().copied());
    for &k in &s.steps {
        w.u32(k);
    }
}

fn read_adam(r: &mut Reader) -> Result<AdamState> {
    let n = r.len(20)?;
    let m = r.f64s(n)?;
    let v = r.f64s(n)?;
    let steps = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    Ok(AdamState { m, v, steps })
}

fn json_error(e: serde_json::Error) -> Error {
    Error::CorruptCheckpoint(format!("invalid embedded JSON: {e}"))
}

/// Serializes `state` into the checkpoint byte format.
pub fn write_checkpoint(state: &ReconstructionState) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(&CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.bytes(&serde_json::to_vec(&state.config).expect("config serializes"));

    let k = &state.intrinsics;
    w.f64s([k.fx, k.fy, k.cx, k.cy]);
    w.len(k.width);
    w.len(k.height);
    w.f64(k.near);

    w.len(state.segments.len());
    for s in &state.segments {
        w.len(s.frame_range.0);
        w.len(s.frame_range.1);
        w.f64(s.t_range.0);
        w.f64(s.t_range.1);
        w.f64(s.extent);
        write_cloud(&mut w, &s.cloud);
        write_adam(&mut w, &s.optimizer);
    }

    w.len(state.trajectory.len());
    for (t, p) in state.trajectory.entries() {
        w.f64(*t);
        w.pose(p);
    }

    w.len(state.history.capacity());
    w.len(state.history.len());
    for (t, p) in state.history.iter() {
        w.f64(*t);
        w.pose(p);
    }

    w.buf.extend_from_slice(&state.rng.get_seed());
    w.u64(state.rng.get_stream());
    w.buf.extend_from_slice(&state.rng.get_word_pos().to_le_bytes());

    w.u64(state.deformation_updates);
    w.bytes(&serde_json::to_vec(&state.progress).expect("progress serializes"));
    w.buf
}

/// Parses checkpoint bytes produced by [`write_checkpoint`].
pub fn read_checkpoint(data: &[u8]) -> Result<ReconstructionState> {
    let mut r = Reader { data, pos: 0 };
    let magic = r.take(4).map_err(|_| Error::CorruptCheckpoint("file too short for a header".into()))?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let config: TrainConfig = serde_json::from_slice(r.bytes()?).map_err(json_error)?;

    let (fx, fy, cx, cy) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let (width, height) = (r.u64()? as usize, r.u64()? as usize);
    let near = r.f64()?;
    let intrinsics = CameraIntrinsics {
        fx,
        fy,
        cx,
        cy,
        width,
        height,
        near,
    };
    intrinsics
        .validate()
        .map_err(|e| Error::CorruptCheckpoint(format!("intrinsics: {e}")))?;

    let segment_count = r.len(56)?;
    let mut segments = Vec::with_capacity(segment_count);
    for _ in 0..segment_count {
        let frame_range = (r.u64()? as usize, r.u64()? as usize);
        let t_range = (r.f64()?, r.f64()?);
        let extent = r.f64()?;
        let cloud = read_cloud(&mut r)?;
        let optimizer = read_adam(&mut r)?;
        segments.push(ModelSegment {
            cloud,
            frame_range,
            t_range,
            optimizer,
            extent,
        });
    }

    let n = r.len(13 * 8)?;
    let entries = (0..n)
        .map(|_| Ok((r.f64()?, r.pose()?)))
        .collect::<Result<Vec<_>>>()?;
    let trajectory = Trajectory::from_entries(entries).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;

    let capacity = r.u64()? as usize;
    let n = r.len(13 * 8)?;
    let mut history = PoseHistory::new(capacity);
    for _ in 0..n {
        let (t, p) = (r.f64()?, r.pose()?);
        history.push(t, p).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    }

    let seed: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);

    let deformation_updates = r.u64()?;
    let progress: Vec<FrameProgress> = serde_json::from_slice(r.bytes()?).map_err(json_error)?;
    if r.pos != data.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", data.len() - r.pos)));
    }
    Ok(ReconstructionState {
        config,
        intrinsics,
        segments,
        trajectory,
        history,
        rng,
        deformation_updates,
        progress,
    })
}

pub fn save_checkpoint(state: &ReconstructionState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_checkpoint(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ReconstructionState> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&data)
}
