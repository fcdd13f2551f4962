//! The `dygs` command-line tool end to end on a tiny synthetic sequence.

use std::path::Path;
use std::process::{Command, Output};

use dygs::eval::ate;
use dygs::io::{load_checkpoint, load_sequence, read_trajectory};

fn dygs(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dygs"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = dygs(dir, args);
    assert!(
        out.status.success(),
        "dygs {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn write(dir: &Path, name: &str, json: serde_json::Value) {
    std::fs::write(dir.join(name), json.to_string()).unwrap();
}

#[test]
fn synth_reconstruct_render_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    write(
        dir,
        "synth.json",
        serde_json::json!({
            "frame_count": 6,
            "gaussian_count": 2000,
            "intrinsics": {"fx": 24, "fy": 24, "cx": 11.5, "cy": 11.5, "width": 24, "height": 24},
            "breathing": {"amplitude": 0.001},
            "trajectory": {"angular_span": 0.02}
        }),
    );
    write(dir, "train.json", serde_json::json!({"stride": 2, "retro_count": 5}));

    let msg = ok(dir, &["synth", "--config", "synth.json", "--out", "data"]);
    assert!(msg.contains("6 frames"));
    for f in ["data/manifest.json", "data/gt_trajectory.txt", "data/synth_config.json", "data/rgb/000005.png"] {
        assert!(dir.join(f).exists(), "{f} missing");
    }

    let summary = ok(dir, &["reconstruct", "--data", "data/manifest.json", "--config", "train.json", "--out", "run"]);
    assert!(summary.contains("6 frames") && summary.contains("ATE"), "{summary}");

    let metrics = std::fs::read_to_string(dir.join("run/metrics.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 6);
    assert!(records.iter().all(|r| r["psnr"].as_f64().unwrap() > 15.0));
    assert_eq!(records[3]["frame"], 3);
    assert_eq!(records[0]["pose"].as_array().unwrap().len(), 16);

    let trajectory = read_trajectory(dir.join("run/trajectory.txt")).unwrap();
    let gt = read_trajectory(dir.join("data/gt_trajectory.txt")).unwrap();
    assert_eq!(trajectory.len(), 6);
    let err = ate(&trajectory, &gt).unwrap();
    // A smoke bound: 24×24 images over a 6 mm path.
    assert!(err < 2.0, "ATE {err} mm");

    let state = load_checkpoint(dir.join("run/checkpoint.dygs")).unwrap();
    assert_eq!(state.trajectory.len(), 6);
    // The trajectory file holds the checkpoint's poses to 9 significant digits.
    for ((_, a), (_, b)) in state.trajectory.entries().iter().zip(trajectory.entries()) {
        assert!((a.translation - b.translation).amax() < 1e-9);
    }

    ok(dir, &["render", "--checkpoint", "run/checkpoint.dygs", "--pose", "2", "--out", "frame2.png"]);
    let img = image::open(dir.join("frame2.png")).unwrap();
    assert_eq!((img.width(), img.height()), (24, 24));
    ok(
        dir,
        &["render", "--checkpoint", "run/checkpoint.dygs", "--pose", "data/gt_trajectory.txt", "--time", "0.1", "--out", "gt0.png"],
    );
    assert!(dir.join("gt0.png").exists());

    let printed = ok(dir, &["evaluate", "--checkpoint", "run/checkpoint.dygs", "--data", "data/manifest.json", "--out", "eval.json"]);
    assert!(printed.contains("mean PSNR"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["frames"].as_array().unwrap().len(), 6);
    assert!(report["mean_psnr"].as_f64().unwrap() > 15.0);
    assert!(report["ate_mm"].as_f64().is_some());

    // The dataset written by `synth` loads back at half resolution too.
    let half = load_sequence(dir.join("data/manifest.json"), 2).unwrap();
    assert_eq!(half.frames[0].width(), 12);
}

#[test]
fn failures_exit_with_a_message() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();

    let out = dygs(dir, &["reconstruct", "--data", "missing.json", "--out", "run"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.starts_with("error:") && err.contains("missing.json"), "{err}");

    std::fs::write(dir.join("bad.json"), "{\"stride\": 0}").unwrap();
    write(
        dir,
        "synth.json",
        serde_json::json!({"frame_count": 2, "gaussian_count": 200,
            "intrinsics": {"fx": 12, "fy": 12, "cx": 5.5, "cy": 5.5, "width": 12, "height": 12}}),
    );
    ok(dir, &["synth", "--config", "synth.json", "--out", "data"]);
    let out = dygs(dir, &["reconstruct", "--data", "data/manifest.json", "--config", "bad.json", "--out", "run"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("stride"));

    let out = dygs(dir, &["render", "--checkpoint", "nothing.dygs", "--pose", "0", "--out", "x.png"]);
    assert!(!out.status.success());

    let env_out = Command::new(env!("CARGO_BIN_EXE_dygs"))
        .args(["synth", "--out", "x"])
        .env("DYGS_THREADS", "zero")
        .current_dir(dir)
        .output()
        .unwrap();
    assert!(!env_out.status.success());
    assert!(String::from_utf8_lossy(&env_out.stderr).contains("DYGS_THREADS"));
}
