//! Two-pass localization with estimated motion masks.
//!
//! Pass A solves without masks under a robust (Geman–McClure) data term, so
//! that the static majority of pixels determines the poses. Each keyframe is
//! then segmented from its flow to the next keyframe using the pass-A depth and
//! relative pose, refined by alternating motion-only pose estimation, and
//! optionally OR-ed with semantic masks. Pass B re-solves with plain least
//! squares on the same keyframes with the masked pixels removed.

use std::str::FromStr;

use log::{info, warn};
use thiserror::Error;

use crate::ba::{solve, BaConfig, BaError, FlowProvider, FrameMasks, KeyframePolicy, LocalizeInput, Localization};
use crate::mask::{combine, discard_if_excessive, refine, MaskConfig, MaskError, MotionMask, SemanticMask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    None,
    Motion,
    MotionSemantic,
}

impl FromStr for MaskMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "ms" => Ok(Self::Motion),
            "ms+ss" => Ok(Self::MotionSemantic),
            other => Err(format!("unknown mask mode '{other}' (expected none, ms or ms+ss)")),
        }
    }
}

#[derive(Debug, Error)]
pub enum LocalizeError {
    #[error(transparent)]
    Ba(#[from] BaError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("semantic masks are required for ms+ss")]
    MissingSemantic,
}

/// Mask outcome for one keyframe.
#[derive(Clone, Debug)]
pub struct KeyframeMaskReport {
    pub frame: usize,
    pub coverage: f64,
    pub discarded: bool,
    pub degenerate: bool,
}

#[derive(Clone, Debug)]
pub struct MaskedLocalization {
    pub result: Localization,
    /// Final combined masks used in the masked pass, per keyframe.
    pub masks: FrameMasks,
    pub reports: Vec<KeyframeMaskReport>,
}

/// Segments every keyframe of a solved graph.
pub fn keyframe_motion_masks(
    first_pass: &Localization,
    flow: &dyn FlowProvider,
    mask_config: &MaskConfig,
    ba_config: &BaConfig,
) -> Result<(FrameMasks, Vec<KeyframeMaskReport>), LocalizeError> {
    let graph = &first_pass.graph;
    let poses = first_pass.trajectory.poses();
    let frames = graph.keyframe_frames();
    let mut masks = FrameMasks::new();
    let mut reports = Vec::new();
    for (index, kf) in graph.keyframes.iter().enumerate() {
        // Pair with a neighbouring keyframe: its pose comes from the joint
        // solve, where a mover cannot be explained consistently by all edges.
        let target = frames.get(index + 1).copied().unwrap_or(frames[index.saturating_sub(1)]);
        let estimate = flow.flow(kf.frame, target).map_err(|message| BaError::Flow {
            from: kf.frame,
            to: target,
            message,
        })?;
        let relative = poses[target].inverse().compose(&poses[kf.frame]);
        let outcome = refine(&estimate, &relative, &kf.depth, &graph.intrinsics, mask_config, ba_config)?;
        let (mask, discarded) = discard_if_excessive(&outcome.mask, mask_config);
        if discarded {
            warn!(
                "frame {}: motion mask covers {:.1}% of the image, discarded",
                kf.frame,
                outcome.mask.coverage * 100.0
            );
        }
        reports.push(KeyframeMaskReport {
            frame: kf.frame,
            coverage: mask.coverage,
            discarded,
            degenerate: outcome.degenerate,
        });
        masks.insert(kf.frame, mask.grid);
    }
    Ok((masks, reports))
}

/// Localizes with the given masking mode. `semantic` is consulted only for `ms+ss`.
pub fn localize(
    input: &LocalizeInput<'_>,
    mode: MaskMode,
    semantic: Option<&FrameMasks>,
    ba_config: &BaConfig,
    mask_config: &MaskConfig,
    policy: &KeyframePolicy,
) -> Result<MaskedLocalization, LocalizeError> {
    if mode == MaskMode::None {
        return Ok(MaskedLocalization {
            result: solve(input, ba_config, policy)?,
            masks: FrameMasks::new(),
            reports: Vec::new(),
        });
    }
    mask_config.validate()?;
    let presolve = BaConfig {
        robust_scale: mask_config.presolve_robust_scale,
        ..ba_config.clone()
    };
    let first = solve(input, &presolve, policy)?;
    let (mut masks, reports) = keyframe_motion_masks(&first, input.flow, mask_config, ba_config)?;
    if mode == MaskMode::MotionSemantic {
        let semantic = semantic.ok_or(LocalizeError::MissingSemantic)?;
        for (frame, grid) in masks.iter_mut() {
            if let Some(s) = semantic.get(frame) {
                let sem = SemanticMask {
                    grid: s.clone(),
                    classes: Vec::new(),
                };
                *grid = combine(&MotionMask::new(grid.clone()), Some(&sem))?.grid;
            }
        }
    }
    info!(
        "masked pass over keyframes {:?}",
        first.graph.keyframe_frames()
    );
    let keyframes = first.graph.keyframe_frames();
    let second = LocalizeInput {
        intrinsics: input.intrinsics,
        timestamps: input.timestamps,
        flow: input.flow,
        masks: Some(&masks),
        initial: input.initial,
        keyframes: Some(&keyframes),
    };
    let result = solve(&second, ba_config, policy)?;
    Ok(MaskedLocalization {
        result,
        masks,
        reports,
    })
}
