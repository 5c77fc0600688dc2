//! `timestamp tx ty tz qx qy qz qw` trajectories, camera-to-world.

use std::fmt::Write as _;
use std::path::Path;

use log::warn;
use nalgebra::Vector3;

use super::IoError;
use crate::ba::Trajectory;
use crate::geometry::PoseSE3;

/// Quaternion norm deviation above which a warning is logged before normalizing.
pub const QUATERNION_TOLERANCE: f64 = 1e-3;

pub fn parse_tum(text: &str) -> Result<Trajectory, IoError> {
    let mut stamps = Vec::new();
    let mut poses = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let number = i + 1;
        let values: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|e| IoError::Parse {
                line: number,
                message: format!("{e} in '{line}'"),
            })?;
        if values.len() != 8 {
            return Err(IoError::Parse {
                line: number,
                message: format!("expected 8 values, found {}", values.len()),
            });
        }
        let norm = (values[4..8].iter().map(|q| q * q).sum::<f64>()).sqrt();
        if (norm - 1.0).abs() > QUATERNION_TOLERANCE {
            warn!("line {number}: quaternion norm {norm:.6}, normalizing");
        }
        let pose = PoseSE3::from_quaternion_xyzw(
            Vector3::new(values[1], values[2], values[3]),
            values[4],
            values[5],
            values[6],
            values[7],
        )
        .map_err(|e| IoError::Parse {
            line: number,
            message: e.to_string(),
        })?;
        stamps.push(values[0]);
        poses.push(pose);
    }
    if poses.is_empty() {
        return Err(IoError::EmptyTrajectory);
    }
    Trajectory::new(stamps, poses).map_err(|e| IoError::Format(e.to_string()))
}

/// One line per pose with nine decimals, so values round-trip within 1e-9.
pub fn format_tum(traj: &Trajectory) -> String {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for (t, p) in traj.iter() {
        let q = p.rotation.quaternion();
        let v = &p.translation;
        writeln!(
            out,
            "{t:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            v.x, v.y, v.z, q.i, q.j, q.k, q.w
        )
        .expect("writing to a String cannot fail");
    }
    out
}

pub fn read_tum_trajectory(path: &Path) -> Result<Trajectory, IoError> {
    parse_tum(&std::fs::read_to_string(path).map_err(IoError::at(path))?)
}

pub fn write_tum_trajectory(traj: &Trajectory, path: &Path) -> Result<(), IoError> {
    std::fs::write(path, format_tum(traj)).map_err(IoError::at(path))
}
