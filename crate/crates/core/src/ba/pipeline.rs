use log::{debug, warn};

use super::{
    apply_masks, build_frame_graph, build_frame_graph_with_keyframes, motion_only_ba, prune_edges,
    BaConfig, BaError, BundleAdjuster, Diagnostics, FlowProvider, FrameGraph, FrameMasks,
    KeyframePolicy, MaskedFlow, Trajectory,
};
use crate::geometry::{CameraIntrinsics, PoseSE3};

/// Everything the localizer consumes.
pub struct LocalizeInput<'a> {
    pub intrinsics: CameraIntrinsics,
    pub timestamps: &'a [f64],
    pub flow: &'a dyn FlowProvider,
    /// Combined dynamic masks per frame; masked pixels never enter any residual.
    pub masks: Option<&'a FrameMasks>,
    /// Camera-to-world initial guesses for every frame. Without them all
    /// keyframes start at the identity.
    pub initial: Option<&'a [PoseSE3]>,
    /// Fixed keyframe selection instead of the flow policy.
    pub keyframes: Option<&'a [usize]>,
}

#[derive(Clone, Debug)]
pub struct Localization {
    /// Camera-to-world pose of every frame.
    pub trajectory: Trajectory,
    pub graph: FrameGraph,
    pub diagnostics: Diagnostics,
    /// Non-keyframes whose pose had to be interpolated.
    pub degenerate_frames: Vec<usize>,
}

/// Interpolates camera-to-world poses: linear in translation, slerp in rotation.
fn interpolate(a: &PoseSE3, b: &PoseSE3, s: f64) -> PoseSE3 {
    PoseSE3::new(
        a.rotation.slerp(&b.rotation, s),
        a.translation * (1.0 - s) + b.translation * s,
    )
}

fn stalled_with_partial(err: BaError, graph: &FrameGraph, timestamps: &[f64]) -> BaError {
    match err {
        BaError::Stalled {
            message,
            diagnostics,
            ..
        } => {
            let partial = Trajectory::new(
                graph.keyframes.iter().map(|k| timestamps[k.frame]).collect(),
                graph.keyframes.iter().map(|k| k.pose.inverse()).collect(),
            )
            .ok()
            .map(Box::new);
            BaError::Stalled {
                message,
                diagnostics,
                partial,
            }
        }
        other => other,
    }
}

/// Full localization: keyframe graph, masked dense BA, then motion-only BA for
/// the remaining frames.
pub fn solve(
    input: &LocalizeInput<'_>,
    config: &BaConfig,
    policy: &KeyframePolicy,
) -> Result<Localization, BaError> {
    config.validate()?;
    input
        .intrinsics
        .validate()
        .map_err(|e| BaError::InvalidArgument(e.to_string()))?;
    let n = input.timestamps.len();
    if n < 2 {
        return Err(BaError::InvalidArgument(format!("need at least 2 frames, got {n}")));
    }
    if input.flow.frame_count() < n || input.initial.is_some_and(|p| p.len() != n) {
        return Err(BaError::InvalidArgument(
            "flow provider or initial poses do not cover every frame".into(),
        ));
    }
    let masked;
    let provider: &dyn FlowProvider = match input.masks {
        Some(masks) => {
            masked = MaskedFlow {
                inner: input.flow,
                masks,
            };
            &masked
        }
        None => input.flow,
    };

    let mut graph = match input.keyframes {
        Some(kfs) => build_frame_graph_with_keyframes(
            kfs,
            provider,
            policy,
            &input.intrinsics,
            config.init_inverse_depth,
        )?,
        None => build_frame_graph(n, provider, policy, &input.intrinsics, config.init_inverse_depth)?,
    };
    if let Some(masks) = input.masks {
        graph = apply_masks(&graph, masks, None)?;
    }
    let mut diagnostics = Diagnostics {
        dropped_edges: prune_edges(&mut graph, config.min_valid_pixels)?,
        ..Default::default()
    };
    for (i, j, valid) in &diagnostics.dropped_edges {
        diagnostics
            .warnings
            .push(format!("edge {i}->{j} dropped with {valid} valid pixels"));
    }
    diagnostics.edges = graph
        .edges
        .iter()
        .map(|e| (graph.keyframes[e.from].frame, graph.keyframes[e.to].frame, e.valid_count()))
        .collect();
    debug!(
        "frame graph: {} keyframes {:?}, {} edges",
        graph.keyframes.len(),
        graph.keyframe_frames(),
        graph.edges.len()
    );

    let mut ba = BundleAdjuster::new(graph, config.clone());
    ba.diagnostics = diagnostics;
    let result = optimize_keyframes(&mut ba, input);
    if let Err(e) = result {
        return Err(stalled_with_partial(e, &ba.graph, input.timestamps));
    }

    let graph = ba.graph;
    let mut diagnostics = ba.diagnostics;
    let (poses, degenerate) = fill_non_keyframes(&graph, input, provider, config)?;
    for f in &degenerate {
        diagnostics
            .warnings
            .push(format!("frame {f} degenerate, pose interpolated"));
    }
    let trajectory = Trajectory::new(input.timestamps.to_vec(), poses)?;
    Ok(Localization {
        trajectory,
        graph,
        diagnostics,
        degenerate_frames: degenerate,
    })
}

fn optimize_keyframes(ba: &mut BundleAdjuster, input: &LocalizeInput<'_>) -> Result<(), BaError> {
    // Without a guess every keyframe starts at the origin: depths are fitted
    // first, and the joint solve then separates rotation from translation.
    // Seeding poses from a constant-depth fit tends to settle in a mirrored
    // rotation/translation minimum instead.
    for kf in &mut ba.graph.keyframes {
        kf.pose = input
            .initial
            .map_or_else(PoseSE3::identity, |initial| initial[kf.frame].inverse());
    }
    warmup_depths(ba)?;
    ba.stage = "global".into();
    ba.damping = ba.config.damping_init;
    let iterations = ba.run(ba.config.max_iterations)?;
    debug!("global BA finished after {iterations} iterations");
    Ok(())
}

fn warmup_depths(ba: &mut BundleAdjuster) -> Result<(), BaError> {
    if ba.config.depth_warmup_iterations == 0 {
        return Ok(());
    }
    ba.optimize_poses = false;
    ba.stage = "depth".into();
    ba.damping = ba.config.damping_init;
    let r = ba.run(ba.config.depth_warmup_iterations);
    ba.optimize_poses = true;
    r.map(|_| ())
}

fn fill_non_keyframes(
    graph: &FrameGraph,
    input: &LocalizeInput<'_>,
    provider: &dyn FlowProvider,
    config: &BaConfig,
) -> Result<(Vec<PoseSE3>, Vec<usize>), BaError> {
    let n = input.timestamps.len();
    let kf_frames = graph.keyframe_frames();
    let mut poses = vec![PoseSE3::identity(); n];
    for kf in &graph.keyframes {
        poses[kf.frame] = kf.pose.inverse();
    }
    let mut degenerate = Vec::new();
    for f in 0..n {
        if kf_frames.contains(&f) {
            continue;
        }
        let next = kf_frames.partition_point(|&k| k < f);
        let (before, after) = (next - 1, next);
        let (fa, fb) = (kf_frames[before], kf_frames[after]);
        let s = (input.timestamps[f] - input.timestamps[fa])
            / (input.timestamps[fb] - input.timestamps[fa]);
        let guess = interpolate(&poses[fa], &poses[fb], s);
        let nearest = if f - fa <= fb - f { before } else { after };
        let kf = &graph.keyframes[nearest];
        let flow = provider.flow(kf.frame, f).map_err(|message| BaError::Flow {
            from: kf.frame,
            to: f,
            message,
        })?;
        match motion_only_ba(
            &input.intrinsics,
            &kf.pose,
            &kf.depth,
            &guess.inverse(),
            &flow,
            None,
            config,
            f,
        ) {
            Ok(p) => poses[f] = p.inverse(),
            Err(BaError::DegenerateFrame { valid, .. }) => {
                warn!("frame {f}: only {valid} valid pixels, interpolating pose");
                poses[f] = guess;
                degenerate.push(f);
            }
            Err(e) => return Err(e),
        }
    }
    Ok((poses, degenerate))
}
