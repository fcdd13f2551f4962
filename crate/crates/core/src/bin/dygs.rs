use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use dygs::eval::{evaluate_reconstruction, generate_sequence, SynthConfig};
use dygs::io::{
    load_checkpoint, load_sequence, read_trajectory, save_checkpoint, save_color_png, write_sequence,
    write_trajectory, DEFAULT_DEPTH_SCALE,
};
use dygs::pose::Se3Pose;
use dygs::train::{reconstruct_sequence_with, TrainConfig};
use dygs::{Error, Result};

#[derive(Parser)]
#[command(name = "dygs", version, about = "Dynamic Gaussian-splatting reconstruction of RGBD sequences with unknown poses")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic RGBD sequence with ground truth.
    Synth(SynthArgs),
    /// Reconstruct a sequence frame by frame.
    Reconstruct(ReconstructArgs),
    /// Render a reconstruction at a given pose and time.
    Render(RenderArgs),
    /// Score a reconstruction against a dataset.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// JSON synthetic-scene configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Depth PNG units per meter.
    #[arg(long, default_value_t = DEFAULT_DEPTH_SCALE)]
    depth_scale: f64,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Dataset manifest.
    #[arg(long)]
    data: PathBuf,
    /// JSON training configuration; defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Skip retrospective learning.
    #[arg(long)]
    no_retro: bool,
    /// Optimize pose and deformation one after the other instead of jointly.
    #[arg(long)]
    no_joint: bool,
    /// Update every basis function instead of the temporally nearby ones.
    #[arg(long)]
    full_activation: bool,
    /// Use raw pixel-aligned Gaussians without per-frame refinement.
    #[arg(long)]
    no_refine: bool,
    /// Integer image downsampling applied on load.
    #[arg(long, default_value_t = 1)]
    downsample: usize,
    /// Print one progress line per frame to stderr.
    #[arg(long, short)]
    verbose: bool,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Frame index into the reconstructed trajectory, or a TUM trajectory
    /// file whose first pose is used.
    #[arg(long)]
    pose: String,
    /// Scene time; defaults to the timestamp of the chosen pose.
    #[arg(long)]
    time: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1)]
    downsample: usize,
    /// Compute PSNR over every pixel instead of tissue pixels only.
    #[arg(long)]
    all_pixels: bool,
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Load {
        context: format!("config {}", path.display()),
        reason: e.to_string(),
    })
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synth(args: SynthArgs) -> Result<()> {
    let config: SynthConfig = read_json(args.config.as_deref())?;
    let seq = generate_sequence(&config)?;
    create_dir(&args.out)?;
    let manifest = write_sequence(&seq.dataset, &args.out, args.depth_scale)?;
    write_trajectory(&seq.gt_trajectory(), args.out.join("gt_trajectory.txt"))?;
    write_file(
        &args.out.join("synth_config.json"),
        serde_json::to_string_pretty(&config).expect("config serializes"),
    )?;
    println!("wrote {} frames to {}", seq.dataset.len(), manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct MetricsRecord {
    frame: usize,
    timestamp: f64,
    psnr: f64,
    ssim: f64,
    loss: Option<f64>,
    /// World-to-camera pose, row-major 4×4.
    pose: [f64; 16],
}

fn reconstruct(args: ReconstructArgs) -> Result<()> {
    let mut config: TrainConfig = read_json(args.config.as_deref())?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    config.retro &= !args.no_retro;
    config.joint &= !args.no_joint;
    config.full_activation |= args.full_activation;
    config.refine &= !args.no_refine;
    let dataset = load_sequence(&args.data, args.downsample)?;
    create_dir(&args.out)?;
    let state = reconstruct_sequence_with(&dataset, &config, |p| {
        if args.verbose {
            eprintln!(
                "frame {:>5}  segment {}  loss {:>10.6}  gaussians {} (+{})",
                p.frame,
                p.segment,
                p.joint_final_loss.unwrap_or(0.0),
                p.gaussian_count,
                p.gaussians_added
            );
        }
    })?;
    write_trajectory(&state.trajectory, args.out.join("trajectory.txt"))?;
    save_checkpoint(&state, args.out.join("checkpoint.dygs"))?;

    let report = evaluate_reconstruction(&state, &dataset, true)?;
    let mut log = Vec::new();
    for (m, p) in report.frames.iter().zip(&state.progress) {
        let record = MetricsRecord {
            frame: m.frame,
            timestamp: m.timestamp,
            psnr: m.psnr,
            ssim: m.ssim,
            loss: p.joint_final_loss,
            pose: p.pose,
        };
        serde_json::to_writer(&mut log, &record).expect("record serializes");
        log.push(b'\n');
    }
    write_file(&args.out.join("metrics.jsonl"), log)?;
    let mut summary = format!(
        "{} frames, {} segments, mean PSNR {:.2} dB, mean SSIM {:.4}",
        dataset.len(),
        state.segments.len(),
        report.mean_psnr,
        report.mean_ssim
    );
    if let Some(ate) = report.ate_mm {
        summary.push_str(&format!(", ATE {ate:.3} mm"));
    }
    println!("{summary}");
    Ok(())
}

fn render(args: RenderArgs) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    let (timestamp, pose): (f64, Se3Pose) = match args.pose.parse::<usize>() {
        Ok(i) => *state.trajectory.entries().get(i).ok_or_else(|| {
            Error::InvalidArgument(format!("pose index {i} outside the trajectory of {} frames", state.trajectory.len()))
        })?,
        Err(_) => {
            let t = read_trajectory(&args.pose)?;
            *t.entries()
                .first()
                .ok_or_else(|| Error::InvalidArgument(format!("{} holds no poses", args.pose)))?
        }
    };
    let out = state.render(args.time.unwrap_or(timestamp), &pose);
    save_color_png(&out.color, &args.out)
}

fn evaluate(args: EvaluateArgs) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    let dataset = load_sequence(&args.data, args.downsample)?;
    let report = evaluate_reconstruction(&state, &dataset, !args.all_pixels)?;
    write_file(&args.out, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    println!("mean PSNR {:.2} dB, mean SSIM {:.4}", report.mean_psnr, report.mean_ssim);
    if let (Some(ate), Some(len)) = (report.ate_mm, report.trajectory_length_mm) {
        println!("ATE {ate:.3} mm over a {len:.1} mm trajectory");
    }
    Ok(())
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("DYGS_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidArgument(format!("DYGS_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidArgument(format!("cannot configure worker threads: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|()| match cli.command {
        Command::Synth(a) => synth(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Render(a) => render(a),
        Command::Evaluate(a) => evaluate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let _ = writeln!(std::io::stderr(), "error: {e}");
            ExitCode::FAILURE
        }
    }
}
