//! Dataset, trajectory and checkpoint persistence through the public API.

use dygs::eval::{generate_sequence, SynthConfig};
use dygs::io::{
    load_checkpoint, load_sequence, read_checkpoint, read_trajectory, save_checkpoint, write_checkpoint,
    write_sequence, write_trajectory, CHECKPOINT_MAGIC,
};
use dygs::scene::CameraIntrinsics;
use dygs::train::{reconstruct_sequence, TrainConfig};
use dygs::Error;

fn tiny() -> SynthConfig {
    let mut cfg = SynthConfig {
        gaussian_count: 1200,
        frame_count: 4,
        intrinsics: CameraIntrinsics::new(20.0, 20.0, 9.5, 9.5, 20, 20).unwrap(),
        ..SynthConfig::default()
    };
    cfg.breathing.amplitude = 0.001;
    cfg
}

#[test]
fn written_sequences_load_back_within_quantization() {
    let seq = generate_sequence(&tiny()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_sequence(&seq.dataset, dir.path(), 10_000.0).unwrap();
    let loaded = load_sequence(&manifest, 1).unwrap();
    assert_eq!(loaded.len(), seq.dataset.len());
    for (a, b) in loaded.gt_poses.as_ref().unwrap().iter().zip(seq.dataset.gt_poses.as_ref().unwrap()) {
        assert!((a.rotation - b.rotation).amax() < 1e-12);
        assert!((a.translation - b.translation).amax() < 1e-12);
    }
    for (a, b) in loaded.frames.iter().zip(&seq.dataset.frames) {
        assert_eq!(a.timestamp, b.timestamp);
        assert_eq!(a.intrinsics, b.intrinsics);
        for (x, y) in a.rgb.data.iter().zip(&b.rgb.data) {
            assert!((x - y).amax() <= 0.5 / 255.0 + 1e-12);
        }
        for (x, y) in a.depth.data.iter().zip(&b.depth.data) {
            assert!((x - y).abs() <= 0.5 / 10_000.0 + 1e-12);
        }
    }
    // Loading is pure.
    assert_eq!(load_sequence(&manifest, 1).unwrap(), loaded);
}

#[test]
fn trajectories_and_checkpoints_roundtrip() {
    let seq = generate_sequence(&tiny()).unwrap();
    let config = TrainConfig {
        stride: 2,
        retro_count: 3,
        refine_iterations: 3,
        ..TrainConfig::default()
    };
    let state = reconstruct_sequence(&seq.dataset, &config).unwrap();
    let dir = tempfile::tempdir().unwrap();

    let traj = dir.path().join("trajectory.txt");
    write_trajectory(&state.trajectory, &traj).unwrap();
    let back = read_trajectory(&traj).unwrap();
    assert_eq!(back.len(), state.trajectory.len());
    for ((ta, a), (tb, b)) in back.entries().iter().zip(state.trajectory.entries()) {
        assert!((ta - tb).abs() < 1e-9);
        assert!((a.rotation - b.rotation).amax() < 1e-8);
        assert!((a.translation - b.translation).amax() < 1e-9);
    }

    let path = dir.path().join("state.dygs");
    save_checkpoint(&state, &path).unwrap();
    let restored = load_checkpoint(&path).unwrap();
    assert_eq!(restored, state);
    assert_eq!(write_checkpoint(&restored), std::fs::read(&path).unwrap());

    let bytes = write_checkpoint(&state);
    assert_eq!(&bytes[..4], &CHECKPOINT_MAGIC);
    let mut future = bytes.clone();
    future[4..8].copy_from_slice(&99u32.to_le_bytes());
    assert!(matches!(read_checkpoint(&future), Err(Error::UnsupportedVersion { found: 99, .. })));
    assert!(matches!(read_checkpoint(&bytes[..bytes.len() / 2]), Err(Error::CorruptCheckpoint(_))));
}
