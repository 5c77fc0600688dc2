//! Levenberg–Marquardt over keyframe twists and per-pixel inverse depths.
//!
//! The depth block of the normal equations is diagonal, so depths are
//! eliminated with a Schur complement and only the `6P × 6P` pose system is
//! factorized. The objective is the confidence-weighted reprojection energy
//! plus a weak prior `ρ ((d − m_k) / m_k)²` pulling each inverse depth towards
//! its keyframe mean `m_k` (frozen for the duration of a step).

use nalgebra::{DMatrix, DVector, Matrix2x6, Vector2, Vector6};

use super::{BaConfig, BaError, Diagnostics, Edge, FrameGraph, IterationRecord, Keyframe};
use crate::geometry::{reproject_point_jacobian, reproject_point, se3_exp, CameraIntrinsics, Twist};

const MIN_INVERSE_DEPTH: f64 = 1e-6;

/// Reprojection energy summed per edge, plus the number of pixels whose reprojection failed.
#[derive(Clone, Debug, PartialEq)]
pub struct EnergyReport {
    pub energy: f64,
    pub per_edge: Vec<f64>,
    pub invalid_reprojections: usize,
}

/// Geman–McClure cost `c² r² / (c² + r²)` of a squared residual and its IRLS
/// weight; plain least squares when `c` is zero.
#[inline]
pub(super) fn robust(r2: f64, c: f64) -> (f64, f64) {
    if c > 0.0 {
        let c2 = c * c;
        let q = c2 / (c2 + r2);
        (r2 * q, q * q)
    } else {
        (r2, 1.0)
    }
}

fn edge_energy(edge: &Edge, keyframes: &[Keyframe], k: &CameraIntrinsics, c: f64) -> (f64, usize) {
    let gi = &keyframes[edge.from].pose;
    let gj = &keyframes[edge.to].pose;
    let rel = gj.compose(&gi.inverse());
    let depth = &keyframes[edge.from].depth;
    let mut sum = 0.0;
    let mut invalid = 0;
    for (i, (&w, f)) in edge.weight.iter().zip(edge.flow.iter()).enumerate() {
        if !(w > 0.0) {
            continue;
        }
        let Some(d) = depth.at(i) else {
            invalid += 1;
            continue;
        };
        let (x, y) = edge.weight.coords(i);
        let p = Vector2::new(x as f64, y as f64);
        match reproject_point(&rel, k, &p, d) {
            Ok(q) => sum += w * robust((p + f - q).norm_squared(), c).0,
            Err(_) => invalid += 1,
        }
    }
    (sum, invalid)
}

/// Weighted reprojection energy of every edge; masked pixels contribute nothing.
pub fn energy_report(graph: &FrameGraph) -> EnergyReport {
    let mut per_edge = Vec::with_capacity(graph.edges.len());
    let mut invalid = 0;
    for e in &graph.edges {
        let (s, n) = edge_energy(e, &graph.keyframes, &graph.intrinsics, 0.0);
        per_edge.push(s);
        invalid += n;
    }
    EnergyReport {
        energy: per_edge.iter().sum(),
        per_edge,
        invalid_reprojections: invalid,
    }
}

pub fn energy(graph: &FrameGraph) -> f64 {
    energy_report(graph).energy
}

/// Eliminable inverse-depth variable with its couplings to free poses.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthBlock {
    pub keyframe: usize,
    pub pixel: usize,
    pub h: f64,
    pub g: f64,
    /// `(free pose index, Jₚᵀ W J_d)`.
    pub coupling: Vec<(usize, Vector6<f64>)>,
}

/// Gauss–Newton normal equations at the current estimate.
#[derive(Clone, Debug)]
pub struct Linearization {
    /// Keyframe index of each free pose variable.
    pub free_poses: Vec<usize>,
    pub pose_h: DMatrix<f64>,
    pub pose_g: DVector<f64>,
    pub depth_blocks: Vec<DepthBlock>,
    /// Data energy plus depth prior.
    pub objective: f64,
    pub depth_means: Vec<f64>,
    pub invalid_reprojections: usize,
}

/// Marquardt-style diagonal damping.
#[inline]
pub fn damp(h: f64, lambda: f64) -> f64 {
    h + lambda * h.max(1e-8)
}

impl Linearization {
    pub fn gradient_is_zero(&self) -> bool {
        self.pose_g.iter().all(|&g| g == 0.0) && self.depth_blocks.iter().all(|b| b.g == 0.0)
    }

    /// Solves the damped system by eliminating depths; returns pose and depth increments.
    pub fn solve_schur(&self, lambda: f64) -> Option<(DVector<f64>, Vec<f64>)> {
        let n = self.pose_h.nrows();
        let mut s = self.pose_h.clone();
        for i in 0..n {
            s[(i, i)] = damp(s[(i, i)], lambda);
        }
        let mut b = -self.pose_g.clone();
        let mut inv_h = Vec::with_capacity(self.depth_blocks.len());
        for block in &self.depth_blocks {
            let inv = 1.0 / damp(block.h, lambda);
            inv_h.push(inv);
            for (a, ea) in &block.coupling {
                let scaled = ea * inv;
                for k in 0..6 {
                    b[6 * a + k] += scaled[k] * block.g;
                }
                for (c, ec) in &block.coupling {
                    for r in 0..6 {
                        for q in 0..6 {
                            s[(6 * a + r, 6 * c + q)] -= scaled[r] * ec[q];
                        }
                    }
                }
            }
        }
        let dp = if n == 0 {
            DVector::zeros(0)
        } else {
            match s.clone().cholesky() {
                Some(ch) => ch.solve(&b),
                None => s.lu().solve(&b)?,
            }
        };
        if dp.iter().any(|x| !x.is_finite()) {
            return None;
        }
        let dd = self
            .depth_blocks
            .iter()
            .zip(inv_h)
            .map(|(block, inv)| {
                let coupled: f64 = block
                    .coupling
                    .iter()
                    .map(|(a, ea)| ea.dot(&dp.fixed_rows::<6>(6 * a)))
                    .sum();
                inv * (-block.g - coupled)
            })
            .collect::<Vec<_>>();
        dd.iter().all(|x| x.is_finite()).then_some((dp, dd))
    }
}

fn depth_means(keyframes: &[Keyframe], active: usize) -> Vec<f64> {
    keyframes[..active]
        .iter()
        .map(|k| k.depth.mean().unwrap_or(1.0))
        .collect()
}

fn prior_objective(keyframes: &[Keyframe], active: usize, means: &[f64], weight: f64) -> f64 {
    if weight == 0.0 {
        return 0.0;
    }
    let mut sum = 0.0;
    for (kf, &m) in keyframes[..active].iter().zip(means) {
        for i in 0..kf.depth.values.len() {
            if let Some(d) = kf.depth.at(i) {
                let r = (d - m) / m;
                sum += r * r;
            }
        }
    }
    weight * sum
}

fn active_edges(edges: &[Edge], active: usize) -> impl Iterator<Item = &Edge> {
    edges.iter().filter(move |e| e.from < active && e.to < active)
}

/// Linearizes the first `active` keyframes. Keyframe 0 is the gauge and never moves.
/// A positive `robust_scale` switches the data term to the Geman–McClure cost, linearized
/// by iteratively reweighted least squares.
pub fn linearize(
    graph: &FrameGraph,
    active: usize,
    optimize_poses: bool,
    prior_weight: f64,
    robust_scale: f64,
) -> Linearization {
    let k = &graph.intrinsics;
    let n_pix = k.pixel_count();
    let mut pose_var = vec![None; active];
    let mut free_poses = Vec::new();
    if optimize_poses {
        for (kf, slot) in pose_var.iter_mut().enumerate().skip(1) {
            *slot = Some(free_poses.len());
            free_poses.push(kf);
        }
    }
    let np = free_poses.len();
    let mut pose_h = DMatrix::zeros(6 * np, 6 * np);
    let mut pose_g = DVector::zeros(6 * np);
    let mut blocks: Vec<DepthBlock> = (0..active * n_pix)
        .map(|i| DepthBlock {
            keyframe: i / n_pix,
            pixel: i % n_pix,
            h: 0.0,
            g: 0.0,
            coupling: Vec::new(),
        })
        .collect();
    let mut objective = 0.0;
    let mut invalid = 0;

    for edge in active_edges(&graph.edges, active) {
        let rel = graph.relative_pose(edge);
        let ad = rel.adjoint();
        let (vi, vj) = (pose_var[edge.from], pose_var[edge.to]);
        let depth = &graph.keyframes[edge.from].depth;
        let mut hii = nalgebra::Matrix6::<f64>::zeros();
        let mut hij = nalgebra::Matrix6::<f64>::zeros();
        let mut hjj = nalgebra::Matrix6::<f64>::zeros();
        let mut gi = Vector6::<f64>::zeros();
        let mut gj = Vector6::<f64>::zeros();
        for (p, (&w, f)) in edge.weight.iter().zip(edge.flow.iter()).enumerate() {
            if !(w > 0.0) {
                continue;
            }
            let Some(d) = depth.at(p) else {
                invalid += 1;
                continue;
            };
            let (x, y) = edge.weight.coords(p);
            let px = Vector2::new(x as f64, y as f64);
            let Ok(jac) = reproject_point_jacobian(&rel, k, &px, d) else {
                invalid += 1;
                continue;
            };
            let r = px + f - jac.pixel;
            let (cost, irls) = robust(r.norm_squared(), robust_scale);
            objective += w * cost;
            let w = w * irls;
            let jd = -jac.d_inverse_depth;
            let jj: Matrix2x6<f64> = -jac.d_relative;
            let ji: Matrix2x6<f64> = jac.d_relative * ad;
            let block = &mut blocks[edge.from * n_pix + p];
            block.h += w * jd.norm_squared();
            block.g += w * jd.dot(&r);
            if let Some(a) = vi {
                let jtw = ji.transpose() * w;
                hii += jtw * ji;
                gi += jtw * r;
                add_coupling(&mut block.coupling, a, jtw * jd);
                if vj.is_some() {
                    hij += jtw * jj;
                }
            }
            if let Some(b) = vj {
                let jtw = jj.transpose() * w;
                hjj += jtw * jj;
                gj += jtw * r;
                add_coupling(&mut block.coupling, b, jtw * jd);
            }
        }
        if let Some(a) = vi {
            add_block(&mut pose_h, a, a, &hii);
            let mut s = pose_g.fixed_rows_mut::<6>(6 * a);
            s += gi;
        }
        if let Some(b) = vj {
            add_block(&mut pose_h, b, b, &hjj);
            let mut s = pose_g.fixed_rows_mut::<6>(6 * b);
            s += gj;
        }
        if let (Some(a), Some(b)) = (vi, vj) {
            add_block(&mut pose_h, a, b, &hij);
            add_block(&mut pose_h, b, a, &hij.transpose());
        }
    }

    let means = depth_means(&graph.keyframes, active);
    if prior_weight > 0.0 {
        for block in &mut blocks {
            let m = means[block.keyframe];
            if let Some(d) = graph.keyframes[block.keyframe].depth.at(block.pixel) {
                let r = (d - m) / m;
                objective += prior_weight * r * r;
                block.h += prior_weight / (m * m);
                block.g += prior_weight * r / m;
            }
        }
    }
    blocks.retain(|b| b.h > 0.0);
    Linearization {
        free_poses,
        pose_h,
        pose_g,
        depth_blocks: blocks,
        objective,
        depth_means: means,
        invalid_reprojections: invalid,
    }
}

fn add_coupling(coupling: &mut Vec<(usize, Vector6<f64>)>, pose: usize, e: Vector6<f64>) {
    match coupling.iter_mut().find(|(p, _)| *p == pose) {
        Some((_, acc)) => *acc += e,
        None => coupling.push((pose, e)),
    }
}

fn add_block(m: &mut DMatrix<f64>, a: usize, b: usize, block: &nalgebra::Matrix6<f64>) {
    let mut view = m.fixed_view_mut::<6, 6>(6 * a, 6 * b);
    view += block;
}

fn objective_of(
    graph: &FrameGraph,
    keyframes: &[Keyframe],
    active: usize,
    means: &[f64],
    config: &BaConfig,
) -> (f64, usize) {
    let prior_weight = config.depth_prior_weight;
    let mut sum = 0.0;
    let mut invalid = 0;
    for e in active_edges(&graph.edges, active) {
        let (s, n) = edge_energy(e, keyframes, &graph.intrinsics, config.robust_scale);
        sum += s;
        invalid += n;
    }
    (sum + prior_objective(keyframes, active, means, prior_weight), invalid)
}

/// Result of one damped Gauss–Newton step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub energy_before: f64,
    pub energy_after: f64,
    pub accepted: bool,
    /// Damping to use for the next step.
    pub damping: f64,
    /// Largest twist norm applied to any keyframe.
    pub max_twist: f64,
}

/// Stateful LM driver over a frame graph.
pub struct BundleAdjuster {
    pub graph: FrameGraph,
    pub config: BaConfig,
    pub damping: f64,
    /// Only the first `active` keyframes (and edges among them) take part.
    pub active: usize,
    pub optimize_poses: bool,
    pub diagnostics: Diagnostics,
    pub stage: String,
}

impl BundleAdjuster {
    pub fn new(graph: FrameGraph, config: BaConfig) -> Self {
        let active = graph.keyframes.len();
        let damping = config.damping_init;
        Self {
            graph,
            config,
            damping,
            active,
            optimize_poses: true,
            diagnostics: Diagnostics::default(),
            stage: "ba".into(),
        }
    }

    pub fn linearize(&self) -> Linearization {
        linearize(
            &self.graph,
            self.active,
            self.optimize_poses,
            self.config.depth_prior_weight,
            self.config.robust_scale,
        )
    }

    fn candidate(&self, lin: &Linearization, dp: &DVector<f64>, dd: &[f64]) -> Result<(Vec<Keyframe>, f64), BaError> {
        let mut kfs = self.graph.keyframes.clone();
        let mut max_twist: f64 = 0.0;
        for (v, &kf) in lin.free_poses.iter().enumerate() {
            let xi = Twist::from_vector(&dp.fixed_rows::<6>(6 * v).into_owned());
            max_twist = max_twist.max(xi.norm());
            let inc = se3_exp(&xi).map_err(|e| BaError::InvalidArgument(e.to_string()))?;
            kfs[kf].pose = inc.compose(&kfs[kf].pose);
        }
        for (block, &delta) in lin.depth_blocks.iter().zip(dd) {
            let d = &mut kfs[block.keyframe].depth.values.as_mut_slice()[block.pixel];
            *d = (*d + delta).max(MIN_INVERSE_DEPTH);
        }
        Ok((kfs, max_twist))
    }

    fn record(&mut self, objective: f64, accepted: bool) {
        let iteration = self
            .diagnostics
            .iterations
            .iter()
            .filter(|r| r.stage == self.stage)
            .count();
        self.diagnostics.iterations.push(IterationRecord {
            stage: self.stage.clone(),
            iteration,
            objective,
            damping: self.damping,
            accepted,
        });
    }

    /// One damped step; damping grows until the objective decreases.
    pub fn step(&mut self) -> Result<StepOutcome, BaError> {
        let lin = self.linearize();
        let before = lin.objective;
        if lin.gradient_is_zero() {
            self.record(before, true);
            return Ok(StepOutcome {
                energy_before: before,
                energy_after: before,
                accepted: true,
                damping: self.damping,
                max_twist: 0.0,
            });
        }
        let mut solved_once = false;
        loop {
            if let Some((dp, dd)) = lin.solve_schur(self.damping) {
                solved_once = true;
                let (kfs, max_twist) = self.candidate(&lin, &dp, &dd)?;
                let (after, invalid) = objective_of(
                    &self.graph,
                    &kfs,
                    self.active,
                    &lin.depth_means,
                    &self.config,
                );
                if after.is_finite() && after < before && invalid <= lin.invalid_reprojections {
                    self.graph.keyframes = kfs;
                    self.damping = (self.damping / self.config.damping_decrease).max(1e-12);
                    self.record(after, true);
                    return Ok(StepOutcome {
                        energy_before: before,
                        energy_after: after,
                        accepted: true,
                        damping: self.damping,
                        max_twist,
                    });
                }
            }
            self.damping *= self.config.damping_scale;
            if self.damping > self.config.damping_max {
                self.damping = self.config.damping_max;
                if !solved_once {
                    return Err(BaError::Stalled {
                        message: format!(
                            "reduced system singular up to damping {:.1e}",
                            self.config.damping_max
                        ),
                        diagnostics: Box::new(self.diagnostics.clone()),
                        partial: None,
                    });
                }
                self.record(before, false);
                return Ok(StepOutcome {
                    energy_before: before,
                    energy_after: before,
                    accepted: false,
                    damping: self.damping,
                    max_twist: 0.0,
                });
            }
        }
    }

    /// Iterates until the relative decrease drops below the tolerance or no step is accepted.
    pub fn run(&mut self, max_iterations: usize) -> Result<usize, BaError> {
        for it in 0..max_iterations {
            let out = self.step()?;
            if !out.accepted {
                return Ok(it);
            }
            let rel = (out.energy_before - out.energy_after) / out.energy_before.max(1e-300);
            if rel < self.config.convergence_tol {
                return Ok(it + 1);
            }
        }
        Ok(max_iterations)
    }
}

/// One damped Gauss–Newton step over all keyframes, starting from the configured damping.
pub fn ba_step(graph: &FrameGraph, config: &BaConfig) -> Result<(FrameGraph, f64, f64), BaError> {
    let mut ba = BundleAdjuster::new(graph.clone(), config.clone());
    let out = ba.step()?;
    Ok((ba.graph, out.energy_before, out.energy_after))
}
