//! TUM-format trajectories: one `timestamp tx ty tz qx qy qz qw` line per
//! pose, camera-to-world.

use std::fs;
use std::path::Path;

use nalgebra::{Quaternion, Vector3};

use crate::error::{Error, Result};
use crate::eval::Trajectory;
use crate::pose::Se3Pose;

const SIGNIFICANT_DIGITS: usize = 9;

/// `%.9g`-style formatting: 9 significant digits, trailing zeros removed,
/// exponent notation only for very small or large magnitudes.
fn format_significant(value: f64) -> String {
    if value == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{:.*e}", SIGNIFICANT_DIGITS - 1, value);
    let (mantissa, exp) = sci.split_once('e').expect("exponent notation");
    let exp: i32 = exp.parse().expect("integer exponent");
    if exp < -4 || exp >= SIGNIFICANT_DIGITS as i32 {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let decimals = (SIGNIFICANT_DIGITS as i32 - 1 - exp).max(0) as usize;
    trim_zeros(&format!("{value:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// One trajectory line for a world-to-camera `pose`.
pub fn format_tum_line(timestamp: f64, pose: &Se3Pose) -> String {
    let c2w = pose.inverse();
    let q = c2w.quaternion();
    let (qx, qy, qz, qw) = if q.w < 0.0 { (-q.i, -q.j, -q.k, -q.w) } else { (q.i, q.j, q.k, q.w) };
    let t = c2w.translation;
    let fields = [t.x, t.y, t.z, qx, qy, qz, qw].map(format_significant);
    format!("{timestamp:.9} {}", fields.join(" "))
}

pub fn write_trajectory(trajectory: &Trajectory, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for (t, pose) in trajectory.entries() {
        text.push_str(&format_tum_line(*t, pose));
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses TUM text into world-to-camera poses. Blank lines and `#` comments
/// are skipped.
pub fn parse_trajectory(text: &str) -> Result<Trajectory> {
    let mut entries = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |reason: &str| Error::Load {
            context: format!("trajectory line {}", line_no + 1),
            reason: reason.to_string(),
        };
        let values = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| bad(&e.to_string()))?;
        if values.len() != 8 {
            return Err(bad(&format!("expected 8 fields, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite value"));
        }
        let q = Quaternion::new(values[7], values[4], values[5], values[6]);
        if q.norm() < 1e-12 {
            return Err(bad("zero quaternion"));
        }
        let c2w = Se3Pose::from_quaternion(&q, Vector3::new(values[1], values[2], values[3]));
        entries.push((values[0], c2w.inverse()));
    }
    Trajectory::from_entries(entries)
}

pub fn read_trajectory(path: impl AsRef<Path>) -> Result<Trajectory> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trajectory(&text)
}
