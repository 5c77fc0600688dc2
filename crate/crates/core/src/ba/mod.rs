//! Masked dense bundle adjustment over a keyframe graph.
//!
//! Keyframe poses map world points into the camera (`x_cam = G x_world`);
//! exported trajectories hold the inverse, camera-to-world, as TUM files do.
//! Every pixel of a keyframe carries an inverse depth. For an edge `(i, j)`
//! the residual at pixel `p` is `p + f_ij(p) − Π(G_j G_i⁻¹ Π⁻¹(p, d_i(p)))`,
//! weighted by the flow confidence, and the weight is forced to zero wherever
//! a motion or semantic mask marks the pixel as dynamic.

mod graph;
mod motion_only;
mod pipeline;
mod solver;

use std::collections::BTreeMap;

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, InverseDepthMap, PoseSE3};
use crate::grid::{FlowField, Grid};

pub use graph::{apply_masks, build_frame_graph, build_frame_graph_with_keyframes, prune_edges};
pub use motion_only::motion_only_ba;
pub use pipeline::{solve, Localization, LocalizeInput};
pub use solver::{ba_step, energy, energy_report, BundleAdjuster, DepthBlock, EnergyReport, Linearization, StepOutcome};

#[derive(Debug, Error)]
pub enum BaError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("flow provider failed for pair ({from} -> {to}): {message}")]
    Flow {
        from: usize,
        to: usize,
        message: String,
    },
    #[error("solver stalled: {message}")]
    Stalled {
        message: String,
        diagnostics: Box<Diagnostics>,
        partial: Option<Box<Trajectory>>,
    },
    #[error("degenerate frame {frame}: {valid} valid pixels, {required} required")]
    DegenerateFrame {
        frame: usize,
        valid: usize,
        required: usize,
    },
    #[error("frame graph disconnected: {0}")]
    Disconnected(String),
}

/// Optical flow between two frames with a per-pixel confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowEstimate {
    pub vectors: Grid<Vector2<f64>>,
    pub confidence: Grid<f64>,
}

impl FlowEstimate {
    pub fn width(&self) -> usize {
        self.vectors.width()
    }

    pub fn height(&self) -> usize {
        self.vectors.height()
    }

    /// Flow with validity taken from positive confidence.
    pub fn to_flow_field(&self) -> FlowField {
        FlowField {
            vectors: self.vectors.clone(),
            valid: self.confidence.map(|&c| c > 0.0),
        }
    }

    pub fn valid_count(&self) -> usize {
        self.confidence.iter().filter(|&&c| c > 0.0).count()
    }

    /// Mean flow magnitude over pixels with positive confidence.
    pub fn mean_magnitude(&self) -> Option<f64> {
        let (s, n) = self
            .vectors
            .iter()
            .zip(self.confidence.iter())
            .filter(|(_, &c)| c > 0.0)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v.norm(), n + 1));
        (n > 0).then(|| s / n as f64)
    }

    /// Zeroes confidence wherever `mask` is set.
    pub fn masked(mut self, mask: &Grid<bool>) -> Self {
        for (c, &m) in self.confidence.as_mut_slice().iter_mut().zip(mask.iter()) {
            if m {
                *c = 0.0;
            }
        }
        self
    }
}

/// Source of dense correspondences between frames of a sequence.
pub trait FlowProvider {
    fn frame_count(&self) -> usize;
    fn flow(&self, from: usize, to: usize) -> Result<FlowEstimate, String>;
}

/// Per-frame boolean masks keyed by frame index.
pub type FrameMasks = BTreeMap<usize, Grid<bool>>;

/// Flow provider that zeroes confidence under the source frame's mask.
pub struct MaskedFlow<'a> {
    pub inner: &'a dyn FlowProvider,
    pub masks: &'a FrameMasks,
}

impl FlowProvider for MaskedFlow<'_> {
    fn frame_count(&self) -> usize {
        self.inner.frame_count()
    }

    fn flow(&self, from: usize, to: usize) -> Result<FlowEstimate, String> {
        let f = self.inner.flow(from, to)?;
        match self.masks.get(&from) {
            Some(m) if m.same_shape(&f.confidence) => Ok(f.masked(m)),
            Some(_) => Err(format!("mask of frame {from} does not match flow shape")),
            None => Ok(f),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Keyframe {
    pub frame: usize,
    /// World-to-camera pose.
    pub pose: PoseSE3,
    pub depth: InverseDepthMap,
}

/// Directed co-visibility edge between keyframes (indices into `FrameGraph::keyframes`).
#[derive(Clone, Debug)]
pub struct Edge {
    pub from: usize,
    pub to: usize,
    pub flow: Grid<Vector2<f64>>,
    pub weight: Grid<f64>,
}

impl Edge {
    pub fn valid_count(&self) -> usize {
        self.weight.iter().filter(|&&w| w > 0.0).count()
    }
}

#[derive(Clone, Debug)]
pub struct FrameGraph {
    pub intrinsics: CameraIntrinsics,
    pub keyframes: Vec<Keyframe>,
    pub edges: Vec<Edge>,
}

impl FrameGraph {
    pub fn keyframe_frames(&self) -> Vec<usize> {
        self.keyframes.iter().map(|k| k.frame).collect()
    }

    /// `G_j G_i⁻¹` for an edge.
    pub fn relative_pose(&self, edge: &Edge) -> PoseSE3 {
        let gi = &self.keyframes[edge.from].pose;
        let gj = &self.keyframes[edge.to].pose;
        gj.compose(&gi.inverse())
    }

    pub fn keyframe_index_of(&self, frame: usize) -> Option<usize> {
        self.keyframes.iter().position(|k| k.frame == frame)
    }
}

/// Keyframe selection and edge construction rules.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KeyframePolicy {
    /// Mean flow (pixels) to the last keyframe that triggers a new keyframe.
    pub min_mean_flow: f64,
    /// Edges connect keyframes at most this many keyframe slots apart.
    pub radius: usize,
    /// Edges whose mean flow exceeds this (pixels) are considered non-overlapping.
    pub max_edge_flow: f64,
}

impl Default for KeyframePolicy {
    fn default() -> Self {
        Self {
            min_mean_flow: 2.4,
            radius: 2,
            max_edge_flow: 48.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaConfig {
    pub max_iterations: usize,
    pub damping_init: f64,
    /// Damping multiplier applied when a step is rejected.
    pub damping_scale: f64,
    /// Damping divisor applied when a step is accepted.
    pub damping_decrease: f64,
    /// Damping above which a step is abandoned.
    pub damping_max: f64,
    /// Relative objective decrease below which iteration stops.
    pub convergence_tol: f64,
    pub depth_prior_weight: f64,
    pub min_valid_pixels: usize,
    /// Inverse depth assigned to every pixel of a fresh keyframe.
    pub init_inverse_depth: f64,
    /// Depth-only iterations run before joint optimization.
    pub depth_warmup_iterations: usize,
    /// Geman–McClure scale (pixels) of the data term; 0 keeps plain least squares.
    pub robust_scale: f64,
}

impl Default for BaConfig {
    fn default() -> Self {
        Self {
            max_iterations: 40,
            damping_init: 1e-4,
            damping_scale: 10.0,
            damping_decrease: 5.0,
            damping_max: 1e10,
            convergence_tol: 1e-7,
            depth_prior_weight: 1e-4,
            min_valid_pixels: 64,
            init_inverse_depth: 0.2,
            depth_warmup_iterations: 3,
            robust_scale: 0.0,
        }
    }
}

impl BaConfig {
    pub fn validate(&self) -> Result<(), BaError> {
        let positive = [
            self.damping_init,
            self.damping_scale,
            self.damping_decrease,
            self.damping_max,
            self.convergence_tol,
            self.init_inverse_depth,
        ];
        if positive.iter().any(|x| !(*x > 0.0) || !x.is_finite())
            || self.depth_prior_weight < 0.0
            || !(self.robust_scale >= 0.0)
            || self.convergence_tol >= 1.0
            || self.max_iterations == 0
            || self.damping_scale <= 1.0
            || self.damping_decrease <= 1.0
        {
            return Err(BaError::InvalidArgument(format!("invalid BA config {self:?}")));
        }
        Ok(())
    }
}

/// Timestamped camera-to-world poses.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    stamps: Vec<f64>,
    poses: Vec<PoseSE3>,
}

impl Trajectory {
    pub fn new(stamps: Vec<f64>, poses: Vec<PoseSE3>) -> Result<Self, BaError> {
        if stamps.len() != poses.len() {
            return Err(BaError::InvalidArgument(
                "timestamp and pose counts differ".into(),
            ));
        }
        if stamps.windows(2).any(|w| !(w[1] > w[0])) || stamps.iter().any(|t| !t.is_finite()) {
            return Err(BaError::InvalidArgument(
                "timestamps must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self { stamps, poses })
    }

    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn stamps(&self) -> &[f64] {
        &self.stamps
    }

    pub fn poses(&self) -> &[PoseSE3] {
        &self.poses
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, &PoseSE3)> {
        self.stamps.iter().copied().zip(self.poses.iter())
    }

    /// Applies `f` to every pose, keeping timestamps.
    pub fn map_poses(&self, f: impl FnMut(&PoseSE3) -> PoseSE3) -> Trajectory {
        Trajectory {
            stamps: self.stamps.clone(),
            poses: self.poses.iter().map(f).collect(),
        }
    }
}

/// Per-iteration solver record.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationRecord {
    pub stage: String,
    pub iteration: usize,
    pub objective: f64,
    pub damping: f64,
    pub accepted: bool,
}

/// Solver trace: iteration energies and per-edge valid-pixel counts.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Diagnostics {
    pub iterations: Vec<IterationRecord>,
    /// `(from frame, to frame, valid pixels)`.
    pub edges: Vec<(usize, usize, usize)>,
    pub dropped_edges: Vec<(usize, usize, usize)>,
    pub invalid_reprojections: usize,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    /// Line-oriented dump: `iter <stage> <n> <objective> <damping> <accepted>` and `edge <i> <j> <valid>`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for r in &self.iterations {
            out.push_str(&format!(
                "iter {} {} {:.12e} {:.3e} {}\n",
                r.stage, r.iteration, r.objective, r.damping, r.accepted as u8
            ));
        }
        for (i, j, n) in &self.edges {
            out.push_str(&format!("edge {i} {j} {n}\n"));
        }
        for (i, j, n) in &self.dropped_edges {
            out.push_str(&format!("dropped {i} {j} {n}\n"));
        }
        for w in &self.warnings {
            out.push_str(&format!("warn {w}\n"));
        }
        out
    }
}
