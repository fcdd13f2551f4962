use crate::buffer::{check_dims, ColorImage, Mask, ScalarImage};
use crate::error::{Error, Result};
use crate::pose::Se3Pose;
use crate::scene::CameraIntrinsics;

/// One timestamped RGBD observation. Depth 0 marks an invalid pixel; the
/// instrument mask is `true` on tissue (usable) pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameObservation {
    pub timestamp: f64,
    pub rgb: ColorImage,
    pub depth: ScalarImage,
    pub instrument_mask: Mask,
    pub intrinsics: CameraIntrinsics,
}

impl FrameObservation {
    pub fn new(
        timestamp: f64,
        rgb: ColorImage,
        depth: ScalarImage,
        instrument_mask: Option<Mask>,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self> {
        let mask = instrument_mask.unwrap_or_else(|| Mask::full(rgb.width, rgb.height));
        let frame = Self {
            timestamp,
            rgb,
            depth,
            instrument_mask: mask,
            intrinsics,
        };
        frame.validate()?;
        Ok(frame)
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn validate(&self) -> Result<()> {
        self.intrinsics.validate()?;
        let (w, h) = (self.intrinsics.width, self.intrinsics.height);
        check_dims("rgb", self.rgb.width, self.rgb.height, w, h)?;
        check_dims("depth", self.depth.width, self.depth.height, w, h)?;
        check_dims("mask", self.instrument_mask.width, self.instrument_mask.height, w, h)?;
        if !self.timestamp.is_finite() {
            return Err(Error::invalid("frame timestamp must be finite"));
        }
        if self.depth.data.iter().any(|&d| d < 0.0) {
            return Err(Error::invalid("depth must be non-negative"));
        }
        Ok(())
    }

    /// Whether pixel `i` carries a usable depth reading.
    #[inline]
    pub fn depth_valid(&self, i: usize) -> bool {
        let d = self.depth.data[i];
        d.is_finite() && d > 0.0
    }
}

/// An ordered RGBD sequence with optional ground-truth world-to-camera poses.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<FrameObservation>,
    pub gt_poses: Option<Vec<Se3Pose>>,
}

impl Dataset {
    pub fn new(frames: Vec<FrameObservation>, gt_poses: Option<Vec<Se3Pose>>) -> Result<Self> {
        let d = Self { frames, gt_poses };
        d.validate()?;
        Ok(d)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn intrinsics(&self) -> Option<&CameraIntrinsics> {
        self.frames.first().map(|f| &f.intrinsics)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.frames.first() else {
            return Err(Error::EmptyDataset);
        };
        for (i, f) in self.frames.iter().enumerate() {
            f.validate().map_err(|e| Error::invalid(format!("frame {i}: {e}")))?;
            if f.intrinsics != first.intrinsics {
                return Err(Error::invalid(format!("frame {i}: intrinsics differ from frame 0")));
            }
            if i > 0 && f.timestamp.partial_cmp(&self.frames[i - 1].timestamp) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::invalid(format!("frame {i}: timestamps must be strictly increasing")));
            }
        }
        if let Some(gt) = &self.gt_poses {
            if gt.len() != self.frames.len() {
                return Err(Error::invalid(format!(
                    "{} ground-truth poses for {} frames",
                    gt.len(),
                    self.frames.len()
                )));
            }
        }
        Ok(())
    }
}
