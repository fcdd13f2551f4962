use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::buffer::Mask;
use crate::error::{Error, Result};
use crate::frame::Dataset;
use crate::train::ReconstructionState;

use super::{ate, psnr, ssim, Trajectory};

/// Quality of the reconstruction rendered at one training view.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub timestamp: f64,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub frames: Vec<FrameMetrics>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Present when the dataset carries ground-truth poses.
    pub ate_mm: Option<f64>,
    pub trajectory_length_mm: Option<f64>,
}

/// Renders every frame of `dataset` at its estimated pose and scores it
/// against the observation. PSNR is taken over tissue pixels when
/// `tissue_only` is set and over the whole image otherwise; SSIM always uses
/// the whole image.
pub fn evaluate_reconstruction(state: &ReconstructionState, dataset: &Dataset, tissue_only: bool) -> Result<EvaluationReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let entries = state.trajectory.entries();
    if entries.len() != dataset.len() {
        return Err(Error::invalid(format!(
            "reconstruction covers {} frames but the dataset has {}",
            entries.len(),
            dataset.len()
        )));
    }
    let frames = dataset
        .frames
        .par_iter()
        .zip(entries.par_iter())
        .enumerate()
        .map(|(i, (frame, (t, pose)))| {
            if (frame.timestamp - t).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "frame {i}: timestamp {} does not match the trajectory ({t})",
                    frame.timestamp
                )));
            }
            let out = state.render(*t, pose);
            let mask = if tissue_only {
                frame.instrument_mask.clone()
            } else {
                Mask::full(frame.width(), frame.height())
            };
            Ok(FrameMetrics {
                frame: i,
                timestamp: *t,
                psnr: psnr(&out.color, &frame.rgb, &mask)?,
                ssim: ssim(&out.color, &frame.rgb)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = frames.len() as f64;
    let mean_psnr = frames.iter().map(|m| m.psnr).sum::<f64>() / n;
    let mean_ssim = frames.iter().map(|m| m.ssim).sum::<f64>() / n;
    let (ate_mm, trajectory_length_mm) = match &dataset.gt_poses {
        Some(gt) => {
            let reference = Trajectory::from_entries(dataset.frames.iter().map(|f| f.timestamp).zip(gt.iter().copied()).collect())?;
            (Some(ate(&state.trajectory, &reference)?), Some(reference.path_length() * 1000.0))
        }
        None => (None, None),
    };
    Ok(EvaluationReport {
        frames,
        mean_psnr,
        mean_ssim,
        ate_mm,
        trajectory_length_mm,
    })
}
