use std::collections::VecDeque;

use log::warn;

use super::{BaError, Edge, FlowEstimate, FlowProvider, FrameGraph, FrameMasks, Keyframe, KeyframePolicy};
use crate::geometry::{CameraIntrinsics, InverseDepthMap, PoseSE3};
use crate::grid::Grid;

fn fetch(provider: &dyn FlowProvider, from: usize, to: usize) -> Result<FlowEstimate, BaError> {
    provider
        .flow(from, to)
        .map_err(|message| BaError::Flow { from, to, message })
}

/// Selects keyframes by mean flow to the last keyframe and connects nearby ones.
///
/// The first and last frames are always keyframes.
pub fn build_frame_graph(
    frame_count: usize,
    provider: &dyn FlowProvider,
    policy: &KeyframePolicy,
    intrinsics: &CameraIntrinsics,
    init_inverse_depth: f64,
) -> Result<FrameGraph, BaError> {
    if frame_count < 2 {
        return Err(BaError::InvalidArgument(format!(
            "need at least 2 frames, got {frame_count}"
        )));
    }
    let mut keyframes = vec![0usize];
    for f in 1..frame_count {
        let last = *keyframes.last().unwrap();
        let mean = fetch(provider, last, f)?.mean_magnitude();
        if mean.is_none_or(|m| m > policy.min_mean_flow) {
            keyframes.push(f);
        }
    }
    if *keyframes.last().unwrap() != frame_count - 1 {
        keyframes.push(frame_count - 1);
    }
    build_frame_graph_with_keyframes(&keyframes, provider, policy, intrinsics, init_inverse_depth)
}

/// Builds the graph for a given, increasing list of keyframe frame indices.
pub fn build_frame_graph_with_keyframes(
    keyframes: &[usize],
    provider: &dyn FlowProvider,
    policy: &KeyframePolicy,
    intrinsics: &CameraIntrinsics,
    init_inverse_depth: f64,
) -> Result<FrameGraph, BaError> {
    if keyframes.len() < 2 || keyframes.windows(2).any(|w| w[1] <= w[0]) {
        return Err(BaError::InvalidArgument(
            "keyframes must be at least 2 strictly increasing frame indices".into(),
        ));
    }
    let (w, h) = (intrinsics.width, intrinsics.height);
    let kfs = keyframes
        .iter()
        .map(|&frame| Keyframe {
            frame,
            pose: PoseSE3::identity(),
            depth: InverseDepthMap::constant(w, h, init_inverse_depth),
        })
        .collect();
    let mut edges = Vec::new();
    for a in 0..keyframes.len() {
        for b in a + 1..keyframes.len().min(a + policy.radius.max(1) + 1) {
            for (i, j) in [(a, b), (b, a)] {
                let est = fetch(provider, keyframes[i], keyframes[j])?;
                if est.width() != w || est.height() != h {
                    return Err(BaError::InvalidArgument(format!(
                        "flow {}->{} has shape {}x{}, expected {w}x{h}",
                        keyframes[i],
                        keyframes[j],
                        est.width(),
                        est.height()
                    )));
                }
                // Consecutive keyframes are always linked; the overlap cutoff applies to the rest.
                let overlaps = b == a + 1
                    || est.mean_magnitude().is_some_and(|m| m <= policy.max_edge_flow);
                if overlaps {
                    edges.push(Edge {
                        from: i,
                        to: j,
                        flow: est.vectors,
                        weight: est.confidence,
                    });
                }
            }
        }
    }
    Ok(FrameGraph {
        intrinsics: *intrinsics,
        keyframes: kfs,
        edges,
    })
}

/// Zeroes edge weights wherever the source frame's motion or semantic mask is set.
pub fn apply_masks(
    graph: &FrameGraph,
    motion: &FrameMasks,
    semantic: Option<&FrameMasks>,
) -> Result<FrameGraph, BaError> {
    let mut out = graph.clone();
    for edge in &mut out.edges {
        let frame = graph.keyframes[edge.from].frame;
        let sources = [motion.get(&frame), semantic.and_then(|s| s.get(&frame))];
        for mask in sources.into_iter().flatten() {
            zero_masked(&mut edge.weight, mask, frame)?;
        }
    }
    Ok(out)
}

fn zero_masked(weight: &mut Grid<f64>, mask: &Grid<bool>, frame: usize) -> Result<(), BaError> {
    if !weight.same_shape(mask) {
        return Err(BaError::InvalidArgument(format!(
            "mask of frame {frame} is {}x{}, weights are {}x{}",
            mask.width(),
            mask.height(),
            weight.width(),
            weight.height()
        )));
    }
    for (w, &m) in weight.as_mut_slice().iter_mut().zip(mask.iter()) {
        if m {
            *w = 0.0;
        }
    }
    Ok(())
}

/// Drops edges with fewer than `min_valid` weighted pixels and checks that the
/// remaining graph is connected. Returns the dropped `(from frame, to frame, valid)`.
pub fn prune_edges(
    graph: &mut FrameGraph,
    min_valid: usize,
) -> Result<Vec<(usize, usize, usize)>, BaError> {
    let mut dropped = Vec::new();
    let keyframes = &graph.keyframes;
    graph.edges.retain(|e| {
        let n = e.valid_count();
        if n < min_valid {
            let (fi, fj) = (keyframes[e.from].frame, keyframes[e.to].frame);
            warn!("dropping edge {fi}->{fj}: {n} valid pixels < {min_valid}");
            dropped.push((fi, fj, n));
            false
        } else {
            true
        }
    });
    check_connected(graph)?;
    Ok(dropped)
}

fn check_connected(graph: &FrameGraph) -> Result<(), BaError> {
    let n = graph.keyframes.len();
    let mut adjacency = vec![Vec::new(); n];
    for e in &graph.edges {
        adjacency[e.from].push(e.to);
        adjacency[e.to].push(e.from);
    }
    if let Some(k) = adjacency.iter().position(|a| a.is_empty()) {
        return Err(BaError::Disconnected(format!(
            "keyframe {} (frame {}) has no edges",
            k, graph.keyframes[k].frame
        )));
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    while let Some(k) = queue.pop_front() {
        for &m in &adjacency[k] {
            if !seen[m] {
                seen[m] = true;
                queue.push_back(m);
            }
        }
    }
    match seen.iter().position(|s| !s) {
        Some(k) => Err(BaError::Disconnected(format!(
            "keyframe {} (frame {}) unreachable from the first keyframe",
            k, graph.keyframes[k].frame
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector2;

    struct ConstantFlow {
        frames: usize,
        per_frame: f64,
    }

    impl FlowProvider for ConstantFlow {
        fn frame_count(&self) -> usize {
            self.frames
        }
        fn flow(&self, from: usize, to: usize) -> Result<FlowEstimate, String> {
            if from >= self.frames || to >= self.frames {
                return Err("out of range".into());
            }
            let dx = self.per_frame * (to as f64 - from as f64);
            Ok(FlowEstimate {
                vectors: Grid::filled(4, 3, Vector2::new(dx, 0.0)),
                confidence: Grid::filled(4, 3, 1.0),
            })
        }
    }

    fn k() -> CameraIntrinsics {
        CameraIntrinsics::new(4.0, 4.0, 1.5, 1.0, 4, 3).unwrap()
    }

    #[test]
    fn two_frames_give_minimal_graph() {
        let p = ConstantFlow { frames: 2, per_frame: 5.0 };
        let g = build_frame_graph(2, &p, &KeyframePolicy::default(), &k(), 0.5).unwrap();
        assert_eq!(g.keyframe_frames(), vec![0, 1]);
        assert_eq!(g.edges.len(), 2);
        assert_eq!((g.edges[0].from, g.edges[0].to), (0, 1));
        assert_eq!((g.edges[1].from, g.edges[1].to), (1, 0));
    }

    #[test]
    fn static_camera_keeps_first_and_last() {
        let p = ConstantFlow { frames: 10, per_frame: 0.0 };
        let policy = KeyframePolicy {
            min_mean_flow: 2.0,
            ..Default::default()
        };
        let g = build_frame_graph(10, &p, &policy, &k(), 0.5).unwrap();
        assert_eq!(g.keyframe_frames(), vec![0, 9]);
    }

    #[test]
    fn policy_spacing_and_radius() {
        let p = ConstantFlow { frames: 10, per_frame: 1.0 };
        let policy = KeyframePolicy {
            min_mean_flow: 2.4,
            radius: 1,
            max_edge_flow: 100.0,
        };
        let g = build_frame_graph(10, &p, &policy, &k(), 0.5).unwrap();
        assert_eq!(g.keyframe_frames(), vec![0, 3, 6, 9]);
        assert_eq!(g.edges.len(), 6);
    }

    #[test]
    fn provider_failure_names_pair() {
        let p = ConstantFlow { frames: 2, per_frame: 1.0 };
        let err = build_frame_graph(3, &p, &KeyframePolicy::default(), &k(), 0.5).unwrap_err();
        assert!(matches!(err, BaError::Flow { from: 0, to: 2, .. }));
        assert!(build_frame_graph(1, &p, &KeyframePolicy::default(), &k(), 0.5).is_err());
    }

    #[test]
    fn masks_zero_exact_pixels() {
        let p = ConstantFlow { frames: 2, per_frame: 1.0 };
        let g = build_frame_graph(2, &p, &KeyframePolicy::default(), &k(), 0.5).unwrap();
        let none = FrameMasks::from([(0, Grid::filled(4, 3, false)), (1, Grid::filled(4, 3, false))]);
        let same = apply_masks(&g, &none, None).unwrap();
        for (a, b) in g.edges.iter().zip(&same.edges) {
            assert_eq!(a.weight, b.weight);
        }
        let checker = Grid::from_fn(4, 3, |x, y| (x + y) % 2 == 0);
        let masks = FrameMasks::from([(0, checker.clone())]);
        let m = apply_masks(&g, &masks, None).unwrap();
        for i in 0..12 {
            let expected = if checker.as_slice()[i] { 0.0 } else { 1.0 };
            assert_eq!(m.edges[0].weight.as_slice()[i], expected);
            assert_eq!(m.edges[1].weight.as_slice()[i], 1.0);
        }
        let twice = apply_masks(&m, &masks, None).unwrap();
        assert_eq!(twice.edges[0].weight, m.edges[0].weight);
        let all = FrameMasks::from([(0, Grid::filled(4, 3, true)), (1, Grid::filled(4, 3, true))]);
        let z = apply_masks(&g, &none, Some(&all)).unwrap();
        assert!(z.edges.iter().all(|e| e.weight.iter().all(|&w| w == 0.0)));
        let wrong = FrameMasks::from([(0, Grid::filled(3, 3, true))]);
        assert!(matches!(apply_masks(&g, &wrong, None), Err(BaError::InvalidArgument(_))));
    }

    #[test]
    fn pruning_reports_disconnection() {
        let p = ConstantFlow { frames: 2, per_frame: 1.0 };
        let mut g = build_frame_graph(2, &p, &KeyframePolicy::default(), &k(), 0.5).unwrap();
        g.edges[0].weight = Grid::filled(4, 3, 0.0);
        let dropped = prune_edges(&mut g, 5).unwrap();
        assert_eq!(dropped, vec![(0, 1, 0)]);
        g.edges[0].weight = Grid::filled(4, 3, 0.0);
        assert!(matches!(prune_edges(&mut g, 5), Err(BaError::Disconnected(_))));
    }
}
