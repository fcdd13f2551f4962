//! Persistence: dataset manifests with PNG frames, TUM trajectory files and
//! binary reconstruction checkpoints.

mod checkpoint;
mod dataset;
mod tum;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use dataset::{load_sequence, save_color_png, write_sequence, DatasetManifest, FrameRecord, ManifestIntrinsics, DEFAULT_DEPTH_SCALE};
pub use tum::{format_tum_line, parse_trajectory, read_trajectory, write_trajectory};
