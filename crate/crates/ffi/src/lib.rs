//! C ABI over the `dygs` library.
//!
//! Objects are exposed as opaque handles created by `*_new`/`*_load`-style
//! functions and released with the matching `*_free`. Every fallible function
//! returns a [`DygsStatus`]; on failure a description is available from
//! [`dygs_last_error`] on the same thread. Panics never cross the boundary:
//! they are reported as `DYGS_STATUS_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use dygs::eval::{evaluate_reconstruction, generate_sequence, SynthConfig};
use dygs::frame::Dataset;
use dygs::io::{load_checkpoint, load_sequence, save_checkpoint, write_trajectory};
use dygs::pose::Se3Pose;
use dygs::train::{reconstruct_sequence, ReconstructionState, TrainConfig};
use dygs::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DygsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    NumericallyUnstable = 3,
    Diverged = 4,
    UndefinedMetric = 5,
    EmptyDataset = 6,
    LoadFailed = 7,
    CorruptCheckpoint = 8,
    UnsupportedVersion = 9,
    Io = 10,
    Panic = 11,
}

/// An RGBD sequence (optionally with ground-truth poses).
pub struct DygsDataset {
    inner: Dataset,
}

/// The result of a reconstruction run: model segments and trajectory.
pub struct DygsReconstruction {
    inner: ReconstructionState,
}

/// Aggregate scores of a reconstruction against a dataset.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct DygsScores {
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Absolute trajectory error in millimeters; NaN without ground truth.
    pub ate_mm: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_last_error(msg: &str) {
    let msg = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> DygsStatus {
    match e {
        Error::InvalidArgument(_) => DygsStatus::InvalidArgument,
        Error::NumericallyUnstable(_) => DygsStatus::NumericallyUnstable,
        Error::Diverged { .. } => DygsStatus::Diverged,
        Error::UndefinedMetric(_) => DygsStatus::UndefinedMetric,
        Error::EmptyDataset => DygsStatus::EmptyDataset,
        Error::Load { .. } => DygsStatus::LoadFailed,
        Error::CorruptCheckpoint(_) => DygsStatus::CorruptCheckpoint,
        Error::UnsupportedVersion { .. } => DygsStatus::UnsupportedVersion,
        Error::Io { .. } => DygsStatus::Io,
    }
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, translating errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> DygsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_last_error("");
            DygsStatus::Ok
        }
        Ok(Err(Failure::Null(what))) => {
            set_last_error(&format!("null pointer: {what}"));
            DygsStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_last_error(&e.to_string());
            status_of(&e)
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| panic.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".to_string());
            set_last_error(&format!("internal panic: {msg}"));
            DygsStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure::Lib(Error::InvalidArgument(format!("{what} is not valid UTF-8"))))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

/// Parses an optional JSON document; NULL selects the defaults.
unsafe fn json_arg<T: serde::de::DeserializeOwned + Default>(p: *const c_char, what: &'static str) -> Result<T, Failure> {
    if p.is_null() {
        return Ok(T::default());
    }
    let text = str_arg(p, what)?;
    serde_json::from_str(text).map_err(|e| Failure::Lib(Error::InvalidArgument(format!("{what}: {e}"))))
}

/// NUL-terminated description of the last failure on this thread (empty
/// after a successful call). Valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn dygs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn dygs_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads the dataset described by the manifest at `manifest_path`, box
/// downsampling images by `downsample` (1 keeps the full resolution).
///
/// # Safety
/// `manifest_path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dygs_dataset_load(manifest_path: *const c_char, downsample: u32, out: *mut *mut DygsDataset) -> DygsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(manifest_path, "manifest_path")?;
        let inner = load_sequence(path, downsample as usize)?;
        *out = Box::into_raw(Box::new(DygsDataset { inner }));
        Ok(())
    })
}

/// Generates a synthetic sequence from a JSON scene configuration (NULL for
/// the defaults).
///
/// # Safety
/// `config_json` must be NULL or NUL-terminated; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn dygs_dataset_synthetic(config_json: *const c_char, out: *mut *mut DygsDataset) -> DygsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let config: SynthConfig = json_arg(config_json, "config_json")?;
        let inner = generate_sequence(&config)?.dataset;
        *out = Box::into_raw(Box::new(DygsDataset { inner }));
        Ok(())
    })
}

/// Number of frames in `dataset`.
///
/// # Safety
/// `dataset` must be a live handle and `out_len` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn dygs_dataset_len(dataset: *const DygsDataset, out_len: *mut usize) -> DygsStatus {
    guard(|| {
        *out_arg(out_len, "out_len")? = ref_arg(dataset, "dataset")?.inner.len();
        Ok(())
    })
}

/// Releases a dataset handle. NULL is ignored.
///
/// # Safety
/// `dataset` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dygs_dataset_free(dataset: *mut DygsDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Reconstructs `dataset` with a JSON training configuration (NULL for the
/// defaults).
///
/// # Safety
/// `dataset` must be a live handle, `config_json` NULL or NUL-terminated,
/// `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dygs_reconstruct(
    dataset: *const DygsDataset,
    config_json: *const c_char,
    out: *mut *mut DygsReconstruction,
) -> DygsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let dataset = ref_arg(dataset, "dataset")?;
        let config: TrainConfig = json_arg(config_json, "config_json")?;
        let inner = reconstruct_sequence(&dataset.inner, &config)?;
        *out = Box::into_raw(Box::new(DygsReconstruction { inner }));
        Ok(())
    })
}

/// Loads a reconstruction checkpoint.
///
/// # Safety
/// `path` must be NUL-terminated and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dygs_reconstruction_load(path: *const c_char, out: *mut *mut DygsReconstruction) -> DygsStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let inner = load_checkpoint(str_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(DygsReconstruction { inner }));
        Ok(())
    })
}

/// Writes a checkpoint of `rec` to `path`.
///
/// # Safety
/// `rec` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dygs_reconstruction_save(rec: *const DygsReconstruction, path: *const c_char) -> DygsStatus {
    guard(|| {
        let rec = ref_arg(rec, "rec")?;
        save_checkpoint(&rec.inner, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Writes the estimated trajectory of `rec` to `path` in TUM format.
///
/// # Safety
/// `rec` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn dygs_reconstruction_write_trajectory(rec: *const DygsReconstruction, path: *const c_char) -> DygsStatus {
    guard(|| {
        let rec = ref_arg(rec, "rec")?;
        write_trajectory(&rec.inner.trajectory, str_arg(path, "path")?)?;
        Ok(())
    })
}

/// Number of poses in the estimated trajectory.
///
/// # Safety
/// `rec` must be a live handle and `out_len` valid.
#[no_mangle]
pub unsafe extern "C" fn dygs_reconstruction_frame_count(rec: *const DygsReconstruction, out_len: *mut usize) -> DygsStatus {
    guard(|| {
        *out_arg(out_len, "out_len")? = ref_arg(rec, "rec")?.inner.trajectory.len();
        Ok(())
    })
}

/// Estimated world-to-camera pose of frame `index` as a row-major 4×4 matrix
/// written to `out_matrix` (16 doubles), and its timestamp.
///
/// # Safety
/// `rec` must be a live handle, `out_matrix` must hold 16 doubles and
/// `out_timestamp` must be valid or NULL.
#[no_mangle]
pub unsafe extern "C" fn dygs_reconstruction_pose(
    rec: *const DygsReconstruction,
    index: usize,
    out_matrix: *mut f64,
    out_timestamp: *mut f64,
) -> DygsStatus {
    guard(|| {
        let rec = ref_arg(rec, "rec")?;
        if out_matrix.is_null() {
            return Err(Failure::Null("out_matrix"));
        }
        let entries = rec.inner.trajectory.entries();
        let (t, pose) = entries.get(index).ok_or_else(|| {
            Error::InvalidArgument(format!("frame index {index} outside the trajectory of {} frames", entries.len()))
        })?;
        std::slice::from_raw_parts_mut(out_matrix, 16).copy_from_slice(&pose.to_row_major());
        if let Some(ts) = out_timestamp.as_mut() {
            *ts = *t;
        }
        Ok(())
    })
}

/// Image size the reconstruction renders at.
///
/// # Safety
/// `rec` must be a live handle; `out_width` and `out_height` valid.
#[no_mangle]
pub unsafe extern "C" fn dygs_reconstruction_image_size(
    rec: *const DygsReconstruction,
    out_width: *mut usize,
    out_height: *mut usize,
) -> DygsStatus {
    guard(|| {
        let k = &ref_arg(rec, "rec")?.inner.intrinsics;
        *out_arg(out_width, "out_width")? = k.width;
        *out_arg(out_height, "out_height")? = k.height;
        Ok(())
    })
}

/// Renders the scene at time `time` from the world-to-camera pose
/// `pose_matrix` (row-major 4×4). Writes interleaved RGB in `[0, 1]`, row by
/// row, into `out_rgb`, which must hold `rgb_len = width·height·3` doubles.
///
/// # Safety
/// `rec` must be a live handle, `pose_matrix` must point to 16 doubles and
/// `out_rgb` to `rgb_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn dygs_reconstruction_render(
    rec: *const DygsReconstruction,
    pose_matrix: *const f64,
    time: f64,
    out_rgb: *mut f64,
    rgb_len: usize,
) -> DygsStatus {
    guard(|| {
        let rec = ref_arg(rec, "rec")?;
        if pose_matrix.is_null() {
            return Err(Failure::Null("pose_matrix"));
        }
        if out_rgb.is_null() {
            return Err(Failure::Null("out_rgb"));
        }
        let k = &rec.inner.intrinsics;
        let needed = k.width * k.height * 3;
        if rgb_len != needed {
            return Err(Error::InvalidArgument(format!("rgb buffer holds {rgb_len} values, {needed} needed")).into());
        }
        if !time.is_finite() {
            return Err(Error::InvalidArgument("time must be finite".into()).into());
        }
        let pose = Se3Pose::from_row_major(std::slice::from_raw_parts(pose_matrix, 16))?;
        let out = rec.inner.render(time, &pose);
        let dst = std::slice::from_raw_parts_mut(out_rgb, needed);
        for (d, c) in dst.chunks_exact_mut(3).zip(&out.color.data) {
            d.copy_from_slice(c.as_slice());
        }
        Ok(())
    })
}

/// Scores `rec` against the frames of `dataset` (PSNR over tissue pixels).
///
/// # Safety
/// Both handles must be live and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn dygs_reconstruction_evaluate(
    rec: *const DygsReconstruction,
    dataset: *const DygsDataset,
    out: *mut DygsScores,
) -> DygsStatus {
    guard(|| {
        let rec = ref_arg(rec, "rec")?;
        let dataset = ref_arg(dataset, "dataset")?;
        let out = out_arg(out, "out")?;
        let report = evaluate_reconstruction(&rec.inner, &dataset.inner, true)?;
        *out = DygsScores {
            mean_psnr: report.mean_psnr,
            mean_ssim: report.mean_ssim,
            ate_mm: report.ate_mm.unwrap_or(f64::NAN),
        };
        Ok(())
    })
}

/// Releases a reconstruction handle. NULL is ignored.
///
/// # Safety
/// `rec` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn dygs_reconstruction_free(rec: *mut DygsReconstruction) {
    if !rec.is_null() {
        drop(Box::from_raw(rec));
    }
}
