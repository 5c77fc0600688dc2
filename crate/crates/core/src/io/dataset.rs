//! Dataset directory layout:
//!
//! ```text
//! intrinsics.txt        fx fy cx cy width height
//! times.txt             one timestamp per frame
//! poses_gt.txt          ground-truth camera-to-world trajectory (optional)
//! rgb/NNNN.ppm          frames
//! depth/NNNN.pfm        depth along the optical axis (optional)
//! flow/NNNN.pfm         flow to the next frame (previous for the last): u, v, confidence
//! flow/pairs/NNNN_MMMM.pfm  flow for any other frame pair
//! mask/NNNN.pbm         ground-truth dynamic pixels (optional)
//! semantic/NNNN.pbm     semantic masks of dynamic classes (optional)
//! ```

use std::path::{Path, PathBuf};

use nalgebra::Vector2;

use super::image::{read_p4, read_p6, read_pfm, write_p4, write_p6, write_pfm, FloatMap};
use super::tum::{read_tum_trajectory, write_tum_trajectory};
use super::IoError;
use crate::ba::{FlowEstimate, FlowProvider, FrameMasks, Trajectory};
use crate::geometry::CameraIntrinsics;
use crate::grid::{Grid, RgbImage};
use crate::synth::GroundTruthFrame;

pub const FLOW_PAIR_DIR: &str = "flow/pairs";

fn frame_file(dir: &str, frame: usize, ext: &str) -> PathBuf {
    PathBuf::from(dir).join(format!("{frame:04}.{ext}"))
}

fn pair_file(from: usize, to: usize) -> PathBuf {
    PathBuf::from(FLOW_PAIR_DIR).join(format!("{from:04}_{to:04}.pfm"))
}

/// Frame paired with `frame` by `flow/NNNN.pfm`.
fn adjacent(frame: usize, count: usize) -> usize {
    if frame + 1 < count {
        frame + 1
    } else {
        frame.saturating_sub(1)
    }
}

fn flow_to_map(f: &FlowEstimate) -> FloatMap {
    FloatMap {
        width: f.width(),
        height: f.height(),
        channels: 3,
        data: f
            .vectors
            .iter()
            .zip(f.confidence.iter())
            .flat_map(|(v, &c)| [v.x as f32, v.y as f32, c as f32])
            .collect(),
    }
}

fn map_to_flow(m: &FloatMap) -> Result<FlowEstimate, IoError> {
    if m.channels != 3 {
        return Err(IoError::Format("flow maps need 3 channels (u, v, confidence)".into()));
    }
    let (u, v, c) = (m.to_grid(0), m.to_grid(1), m.to_grid(2));
    Ok(FlowEstimate {
        vectors: Grid::from_fn(m.width, m.height, |x, y| Vector2::new(*u.get(x, y), *v.get(x, y))),
        confidence: c,
    })
}

fn create_dirs(root: &Path) -> Result<(), IoError> {
    for d in ["rgb", "depth", "flow", FLOW_PAIR_DIR, "mask", "semantic"] {
        let p = root.join(d);
        std::fs::create_dir_all(&p).map_err(IoError::at(&p))?;
    }
    Ok(())
}

/// Writes rendered frames plus the flow `provider` gives for every ordered frame pair.
pub fn write_dataset(
    root: &Path,
    frames: &[GroundTruthFrame],
    k: &CameraIntrinsics,
    provider: &dyn FlowProvider,
) -> Result<(), IoError> {
    if frames.is_empty() {
        return Err(IoError::InvalidArgument("no frames to write".into()));
    }
    create_dirs(root)?;
    let intr = root.join("intrinsics.txt");
    std::fs::write(
        &intr,
        format!("# fx fy cx cy width height\n{} {} {} {} {} {}\n", k.fx, k.fy, k.cx, k.cy, k.width, k.height),
    )
    .map_err(IoError::at(&intr))?;
    let times: String = frames.iter().map(|f| format!("{:.9}\n", f.timestamp)).collect();
    let tp = root.join("times.txt");
    std::fs::write(&tp, times).map_err(IoError::at(&tp))?;
    let gt = Trajectory::new(
        frames.iter().map(|f| f.timestamp).collect(),
        frames.iter().map(|f| f.pose).collect(),
    )
    .map_err(|e| IoError::InvalidArgument(e.to_string()))?;
    write_tum_trajectory(&gt, &root.join("poses_gt.txt"))?;

    let n = frames.len();
    for (i, f) in frames.iter().enumerate() {
        write_p6(&f.image, &root.join(frame_file("rgb", i, "ppm")))?;
        write_pfm(&FloatMap::from_grid(&f.depth), &root.join(frame_file("depth", i, "pfm")))?;
        write_p4(&f.motion_mask, &root.join(frame_file("mask", i, "pbm")))?;
        write_p4(&f.semantic_mask, &root.join(frame_file("semantic", i, "pbm")))?;
        for j in (0..n).filter(|&j| j != i) {
            let flow = provider.flow(i, j).map_err(IoError::InvalidArgument)?;
            let map = flow_to_map(&flow);
            if j == adjacent(i, n) {
                write_pfm(&map, &root.join(frame_file("flow", i, "pfm")))?;
            }
            write_pfm(&map, &root.join(pair_file(i, j)))?;
        }
    }
    Ok(())
}

/// A dataset loaded from disk; flow is read on demand through [`DiskFlow`].
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub intrinsics: CameraIntrinsics,
    pub timestamps: Vec<f64>,
    pub images: Vec<RgbImage>,
    pub ground_truth: Option<Trajectory>,
    pub motion_masks: Option<FrameMasks>,
    pub semantic_masks: Option<FrameMasks>,
}

impl Dataset {
    pub fn frame_count(&self) -> usize {
        self.timestamps.len()
    }

    pub fn flow(&self) -> DiskFlow {
        DiskFlow {
            root: self.root.clone(),
            frames: self.frame_count(),
        }
    }

    /// Normalized time of a frame in `[0, 1]`.
    pub fn normalized_time(&self, frame: usize) -> f64 {
        let (t0, t1) = (self.timestamps[0], *self.timestamps.last().unwrap());
        if t1 > t0 {
            (self.timestamps[frame] - t0) / (t1 - t0)
        } else {
            0.0
        }
    }
}

fn parse_intrinsics(text: &str) -> Result<CameraIntrinsics, IoError> {
    let (number, line) = text
        .lines()
        .enumerate()
        .find(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .ok_or_else(|| IoError::Format("intrinsics file is empty".into()))?;
    let parse_err = |m: String| IoError::Parse {
        line: number + 1,
        message: m,
    };
    let t: Vec<&str> = line.split_whitespace().collect();
    if t.len() != 6 {
        return Err(parse_err(format!("expected 'fx fy cx cy width height', got '{line}'")));
    }
    let f: Vec<f64> = t[..4]
        .iter()
        .map(|s| s.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| parse_err(e.to_string()))?;
    let w: usize = t[4].parse().map_err(|_| parse_err(format!("bad width '{}'", t[4])))?;
    let h: usize = t[5].parse().map_err(|_| parse_err(format!("bad height '{}'", t[5])))?;
    CameraIntrinsics::new(f[0], f[1], f[2], f[3], w, h).map_err(|e| parse_err(e.to_string()))
}

fn parse_times(text: &str) -> Result<Vec<f64>, IoError> {
    let mut out = Vec::new();
    for (i, l) in text.lines().enumerate() {
        let l = l.trim();
        if l.is_empty() || l.starts_with('#') {
            continue;
        }
        out.push(l.parse::<f64>().map_err(|e| IoError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    if out.len() < 2 || out.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(IoError::Format("need ≥ 2 strictly increasing timestamps".into()));
    }
    Ok(out)
}

fn load_masks(root: &Path, dir: &str, n: usize, k: &CameraIntrinsics) -> Result<Option<FrameMasks>, IoError> {
    if !root.join(dir).is_dir() {
        return Ok(None);
    }
    let mut masks = FrameMasks::new();
    for i in 0..n {
        let p = root.join(frame_file(dir, i, "pbm"));
        if p.exists() {
            let m = read_p4(&p)?;
            if m.width() != k.width || m.height() != k.height {
                return Err(IoError::Format(format!("{}: size differs from intrinsics", p.display())));
            }
            masks.insert(i, m);
        }
    }
    Ok(Some(masks))
}

/// Reads an `intrinsics.txt` file.
pub fn load_intrinsics(path: &Path) -> Result<CameraIntrinsics, IoError> {
    parse_intrinsics(&std::fs::read_to_string(path).map_err(IoError::at(path))?)
}

pub fn load_dataset(root: &Path) -> Result<Dataset, IoError> {
    let read = |name: &str| {
        let p = root.join(name);
        std::fs::read_to_string(&p).map_err(IoError::at(&p))
    };
    let intrinsics = parse_intrinsics(&read("intrinsics.txt")?)?;
    let timestamps = parse_times(&read("times.txt")?)?;
    let n = timestamps.len();
    let images = (0..n)
        .map(|i| {
            let img = read_p6(&root.join(frame_file("rgb", i, "ppm")))?;
            if img.width() != intrinsics.width || img.height() != intrinsics.height {
                return Err(IoError::Format(format!("frame {i}: size differs from intrinsics")));
            }
            Ok(img)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let gt_path = root.join("poses_gt.txt");
    let ground_truth = if gt_path.exists() {
        Some(read_tum_trajectory(&gt_path)?)
    } else {
        None
    };
    Ok(Dataset {
        root: root.to_path_buf(),
        motion_masks: load_masks(root, "mask", n, &intrinsics)?,
        semantic_masks: load_masks(root, "semantic", n, &intrinsics)?,
        intrinsics,
        timestamps,
        images,
        ground_truth,
    })
}

/// Reads flow files of a dataset directory on demand.
#[derive(Clone, Debug)]
pub struct DiskFlow {
    pub root: PathBuf,
    pub frames: usize,
}

impl FlowProvider for DiskFlow {
    fn frame_count(&self) -> usize {
        self.frames
    }

    fn flow(&self, from: usize, to: usize) -> Result<FlowEstimate, String> {
        if from >= self.frames || to >= self.frames || from == to {
            return Err(format!("frame pair ({from}, {to}) out of range"));
        }
        let pair = self.root.join(pair_file(from, to));
        let path = if pair.exists() || to != adjacent(from, self.frames) {
            pair
        } else {
            self.root.join(frame_file("flow", from, "pfm"))
        };
        let map = read_pfm(&path).map_err(|e| e.to_string())?;
        map_to_flow(&map).map_err(|e| format!("{}: {e}", path.display()))
    }
}
