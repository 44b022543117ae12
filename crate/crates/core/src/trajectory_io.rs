//! Timestamped pose lists in the plain-text TUM format:
//! `timestamp tx ty tz qx qy qz qw`, one pose per line, `#` comments.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Isometry3, Quaternion, Translation3, UnitQuaternion, Vector3};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajectoryIoError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected 8 fields, got {got}")]
    FieldCount { line: usize, got: usize },
    #[error("line {line}: unparsable number {token:?}")]
    BadNumber { line: usize, token: String },
    #[error("line {line}: quaternion norm {norm} too far from 1")]
    BadQuaternion { line: usize, norm: f64 },
    #[error("line {line}: timestamps must be strictly increasing")]
    NonMonotone { line: usize },
}

/// A body pose sampled at one instant.
#[derive(Debug, Clone, PartialEq)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: Isometry3<f64>,
}

impl TimedPose {
    pub fn new(timestamp: f64, pose: Isometry3<f64>) -> Self {
        Self { timestamp, pose }
    }

    pub fn position(&self) -> Vector3<f64> {
        self.pose.translation.vector
    }
}

fn io_err(path: &Path, source: std::io::Error) -> TrajectoryIoError {
    TrajectoryIoError::Io { path: path.display().to_string(), source }
}

/// Writes poses in TUM order with full f64 round-trip precision.
pub fn write_tum(path: &Path, poses: &[TimedPose]) -> Result<(), TrajectoryIoError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "# timestamp tx ty tz qx qy qz qw")?;
        for tp in poses {
            let t = tp.pose.translation.vector;
            let q = tp.pose.rotation.quaternion();
            writeln!(
                w,
                "{} {} {} {} {} {} {} {}",
                tp.timestamp, t.x, t.y, t.z, q.i, q.j, q.k, q.w
            )?;
        }
        w.flush()
    };
    emit().map_err(|e| io_err(path, e))
}

/// Reads a TUM file, skipping comment and blank lines. Quaternions are
/// renormalized; norms off by more than 1e-3 are rejected.
pub fn read_tum(path: &Path) -> Result<Vec<TimedPose>, TrajectoryIoError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut poses = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        let line_no = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(TrajectoryIoError::FieldCount { line: line_no, got: fields.len() });
        }
        let mut nums = [0.0_f64; 8];
        for (slot, token) in nums.iter_mut().zip(&fields) {
            *slot = token.parse().map_err(|_| TrajectoryIoError::BadNumber {
                line: line_no,
                token: token.to_string(),
            })?;
        }
        let q = Quaternion::new(nums[7], nums[4], nums[5], nums[6]);
        let norm = q.norm();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(TrajectoryIoError::BadQuaternion { line: line_no, norm });
        }
        // Components written from a unit quaternion must survive the
        // round trip bit-exactly, so renormalize only when actually needed.
        let rotation = if (norm - 1.0).abs() < 1e-12 {
            UnitQuaternion::new_unchecked(q)
        } else {
            UnitQuaternion::from_quaternion(q)
        };
        if let Some(prev) = poses.last() {
            let prev: &TimedPose = prev;
            if nums[0] <= prev.timestamp {
                return Err(TrajectoryIoError::NonMonotone { line: line_no });
            }
        }
        poses.push(TimedPose {
            timestamp: nums[0],
            pose: Isometry3::from_parts(Translation3::new(nums[1], nums[2], nums[3]), rotation),
        });
    }
    Ok(poses)
}
