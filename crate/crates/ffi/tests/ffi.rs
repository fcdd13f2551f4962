use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use dygs_ffi::*;

const SCENE: &str = r#"{"frame_count":4,"gaussian_count":1200,
    "intrinsics":{"fx":24,"fy":24,"cx":15.5,"cy":15.5,"width":32,"height":32},
    "breathing":{"amplitude":0.001}}"#;
const TRAINING: &str = r#"{"stride":4,"retro_count":3,"refine_iterations":2}"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(dygs_last_error()) }.to_string_lossy().into_owned()
}

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

struct Fixture {
    dataset: *mut DygsDataset,
    rec: *mut DygsReconstruction,
}

impl Fixture {
    fn new() -> Self {
        let mut dataset = ptr::null_mut();
        let mut rec = ptr::null_mut();
        unsafe {
            assert_eq!(dygs_dataset_synthetic(cstr(SCENE).as_ptr(), &mut dataset), DygsStatus::Ok, "{}", last_error());
            assert_eq!(dygs_reconstruct(dataset, cstr(TRAINING).as_ptr(), &mut rec), DygsStatus::Ok, "{}", last_error());
        }
        Self { dataset, rec }
    }
}

impl Drop for Fixture {
    fn drop(&mut self) {
        unsafe {
            dygs_reconstruction_free(self.rec);
            dygs_dataset_free(self.dataset);
        }
    }
}

#[test]
fn version_is_a_c_string() {
    let v = unsafe { CStr::from_ptr(dygs_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_arguments_are_reported() {
    let mut out = ptr::null_mut();
    let status = unsafe { dygs_dataset_load(ptr::null(), 1, &mut out) };
    assert_eq!(status, DygsStatus::NullPointer);
    assert!(last_error().contains("manifest_path"));
    assert!(out.is_null());
    let status = unsafe { dygs_dataset_len(ptr::null(), ptr::null_mut()) };
    assert_eq!(status, DygsStatus::NullPointer);
    unsafe {
        dygs_dataset_free(ptr::null_mut());
        dygs_reconstruction_free(ptr::null_mut());
    }
}

#[test]
fn library_errors_map_to_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut ds = ptr::null_mut();
    let missing = cstr(dir.path().join("none.json").to_str().unwrap());
    assert_eq!(unsafe { dygs_dataset_load(missing.as_ptr(), 1, &mut ds) }, DygsStatus::Io);
    assert!(!last_error().is_empty());

    let bad = dir.path().join("bad.dygs");
    std::fs::write(&bad, b"NOPE\x01\x00\x00\x00").unwrap();
    let mut rec = ptr::null_mut();
    let path = cstr(bad.to_str().unwrap());
    assert_eq!(unsafe { dygs_reconstruction_load(path.as_ptr(), &mut rec) }, DygsStatus::CorruptCheckpoint);
    assert!(rec.is_null());

    let mut ds = ptr::null_mut();
    let status = unsafe { dygs_dataset_synthetic(cstr("{not json").as_ptr(), &mut ds) };
    assert_eq!(status, DygsStatus::InvalidArgument);
}

#[test]
fn reconstruct_query_render_and_persist() {
    let fx = Fixture::new();
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let mut n = 0usize;
        assert_eq!(dygs_dataset_len(fx.dataset, &mut n), DygsStatus::Ok);
        assert_eq!(n, 4);
        let mut frames = 0usize;
        assert_eq!(dygs_reconstruction_frame_count(fx.rec, &mut frames), DygsStatus::Ok);
        assert_eq!(frames, 4);

        let mut pose = [0.0f64; 16];
        let mut t = -1.0;
        assert_eq!(dygs_reconstruction_pose(fx.rec, 2, pose.as_mut_ptr(), &mut t), DygsStatus::Ok);
        assert!(t > 0.0);
        assert_eq!(&pose[12..], &[0.0, 0.0, 0.0, 1.0]);
        assert_eq!(dygs_reconstruction_pose(fx.rec, 9, pose.as_mut_ptr(), ptr::null_mut()), DygsStatus::InvalidArgument);

        let (mut w, mut h) = (0usize, 0usize);
        assert_eq!(dygs_reconstruction_image_size(fx.rec, &mut w, &mut h), DygsStatus::Ok);
        assert_eq!((w, h), (32, 32));
        let mut rgb = vec![-1.0f64; w * h * 3];
        assert_eq!(
            dygs_reconstruction_render(fx.rec, pose.as_ptr(), t, rgb.as_mut_ptr(), rgb.len() - 1),
            DygsStatus::InvalidArgument
        );
        assert_eq!(dygs_reconstruction_render(fx.rec, pose.as_ptr(), t, rgb.as_mut_ptr(), rgb.len()), DygsStatus::Ok);
        assert!(rgb.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(rgb.iter().any(|&v| v > 0.05));

        let mut scores = DygsScores::default();
        assert_eq!(dygs_reconstruction_evaluate(fx.rec, fx.dataset, &mut scores), DygsStatus::Ok);
        assert!(scores.mean_psnr > 10.0 && scores.mean_ssim > 0.0);
        assert!(scores.ate_mm.is_finite());

        let ckpt = dir.path().join("state.dygs");
        let ckpt_c = cstr(ckpt.to_str().unwrap());
        assert_eq!(dygs_reconstruction_save(fx.rec, ckpt_c.as_ptr()), DygsStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(dygs_reconstruction_load(ckpt_c.as_ptr(), &mut back), DygsStatus::Ok);
        let mut pose_back = [0.0f64; 16];
        assert_eq!(dygs_reconstruction_pose(back, 2, pose_back.as_mut_ptr(), ptr::null_mut()), DygsStatus::Ok);
        assert_eq!(pose, pose_back);
        dygs_reconstruction_free(back);

        let traj = dir.path().join("traj.txt");
        let traj_c = cstr(traj.to_str().unwrap());
        assert_eq!(dygs_reconstruction_write_trajectory(fx.rec, traj_c.as_ptr()), DygsStatus::Ok);
        assert_eq!(std::fs::read_to_string(&traj).unwrap().lines().count(), 4);
    }
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dygs.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "dygs_last_error",
        "dygs_dataset_load",
        "dygs_reconstruct",
        "dygs_reconstruction_render",
        "dygs_reconstruction_free",
        "DYGS_STATUS_CORRUPT_CHECKPOINT",
    ] {
        assert!(text.contains(name), "{name} missing from the header");
    }
    let Ok(status) = Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c"])
        .arg(&header)
        .status()
    else {
        eprintln!("no C compiler available; skipping the compile check");
        return;
    };
    assert!(status.success(), "header does not compile as C");
}
