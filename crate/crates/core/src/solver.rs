//! IRLS Gauss-Newton refinement of one rigid motion per instance, and the
//! per-frame pipeline (prune, RANSAC, solve) with its fallback rule.

use std::collections::BTreeMap;
use std::fmt;

use nalgebra::{Matrix6, SymmetricEigen, Vector6};
use rayon::prelude::*;

use crate::energy::{enabled_blocks, total_energy, EnergyConfig, EnergyWeights, InstanceProblem};
use crate::error::{Error, Result};
use crate::frameio::FrameSet;
use crate::geometry::{RigidMotion, Twist};
use crate::init::{prune_occluded, ransac_init, RansacConfig, OCCLUSION_THRESHOLD};

/// Smallest eigenvalue ratio of the Jacobi-scaled normal matrix accepted as full rank.
pub const RANK_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SolverConfig {
    pub max_steps: usize,
    pub plateau_rel_tol: f64,
    pub plateau_patience: usize,
    /// First non-zero damping tried after the undamped step is rejected.
    pub damping_init: f64,
    pub damping_factor: f64,
    /// Backtracking gives up once damping would exceed this.
    pub damping_max: f64,
    /// Largest twist-update norm per step.
    pub step_twist_cap: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            max_steps: 50,
            plateau_rel_tol: 1e-6,
            plateau_patience: 3,
            damping_init: 1e-4,
            damping_factor: 10.0,
            damping_max: 1e8,
            step_twist_cap: 1.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.max_steps >= 1
            && self.plateau_rel_tol > 0.0
            && self.plateau_patience >= 1
            && self.damping_init > 0.0
            && self.damping_factor > 1.0
            && self.damping_max >= self.damping_init
            && self.step_twist_cap > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad solver config {self:?}")))
        }
    }
}

/// `H = Σ λ w JᵀJ` and `g = Σ λ w Jᵀr`, accumulated in pixel order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalEquations {
    pub hessian: Matrix6<f64>,
    pub gradient: Vector6<f64>,
    pub rows: usize,
}

pub fn normal_equations(prob: &InstanceProblem, motion: &RigidMotion) -> Result<NormalEquations> {
    let mut hessian = Matrix6::zeros();
    let mut gradient = Vector6::zeros();
    let mut rows = 0;
    for (lambda, block) in enabled_blocks(prob, motion) {
        if !block.is_finite() {
            return Err(Error::NonFinite("residuals"));
        }
        for k in 0..block.len() {
            let j = &block.jacobians[k];
            let w = lambda * block.weights[k];
            hessian += w * j.transpose() * j;
            gradient += (w * block.residuals[k]) * j.transpose();
        }
        rows += block.len();
    }
    if rows == 0 {
        return Err(Error::EmptyProblem(prob.instance_id));
    }
    Ok(NormalEquations {
        hessian,
        gradient,
        rows,
    })
}

impl NormalEquations {
    /// Errors when some direction of the twist is unobservable.
    pub fn check_rank(&self) -> Result<()> {
        let d = self.hessian.diagonal();
        if d.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::RankDeficient);
        }
        let s = d.map(|v| 1.0 / v.sqrt());
        let scaled = Matrix6::from_fn(|r, c| self.hessian[(r, c)] * s[r] * s[c]);
        let eig = SymmetricEigen::new(scaled).eigenvalues;
        let max = eig.max();
        let min = eig.min();
        if !(max > 0.0) || min <= RANK_TOLERANCE * max {
            return Err(Error::RankDeficient);
        }
        Ok(())
    }

    /// Solves `(H + μ diag(H)) δ = -g`; the step norm is capped.
    pub fn step(&self, damping: f64, cap: f64) -> Result<Twist> {
        let mut a = self.hessian;
        for k in 0..6 {
            a[(k, k)] *= 1.0 + damping;
        }
        let chol = a.cholesky().ok_or(Error::RankDeficient)?;
        let mut delta = chol.solve(&(-self.gradient));
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("step"));
        }
        let norm = delta.norm();
        if norm > cap {
            delta *= cap / norm;
        }
        Ok(Twist::from_vector(&delta))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepDiagnostics {
    pub rows: usize,
    pub damping: f64,
    pub step_norm: f64,
}

/// One damped Gauss-Newton update `exp(δ) ∘ T`.
pub fn gn_step(
    prob: &InstanceProblem,
    motion: &RigidMotion,
    damping: f64,
    cfg: &SolverConfig,
) -> Result<(RigidMotion, StepDiagnostics)> {
    let ne = normal_equations(prob, motion)?;
    ne.check_rank()?;
    let delta = ne.step(damping, cfg.step_twist_cap)?;
    let next = delta.exp()?.compose(motion);
    Ok((
        next,
        StepDiagnostics {
            rows: ne.rows,
            damping,
            step_norm: delta.to_vector().norm(),
        },
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    Plateau,
    MaxSteps,
    /// No damping level produced a non-increasing energy.
    Stalled,
    /// The instance could not be solved; it carries the background motion.
    Fallback,
}

impl fmt::Display for Termination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Termination::Plateau => "plateau",
            Termination::MaxSteps => "max_steps",
            Termination::Stalled => "stalled",
            Termination::Fallback => "fallback",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolveReport {
    pub instance_id: u32,
    pub motion: RigidMotion,
    pub twist: Twist,
    pub initial: RigidMotion,
    /// Energy before the first step and after each accepted step.
    pub energy_trace: Vec<f64>,
    pub steps: usize,
    /// Damping of each accepted step.
    pub damping: Vec<f64>,
    pub termination: Termination,
    pub fallback_reason: Option<String>,
    pub pixels: usize,
    pub inliers: usize,
}

impl SolveReport {
    pub fn final_energy(&self) -> f64 {
        *self.energy_trace.last().unwrap_or(&f64::INFINITY)
    }

    pub fn is_fallback(&self) -> bool {
        self.termination == Termination::Fallback
    }
}

/// Levenberg-safeguarded IRLS Gauss-Newton from `init`.
pub fn solve_instance(prob: &InstanceProblem, init: &RigidMotion, cfg: &SolverConfig) -> Result<SolveReport> {
    cfg.validate()?;
    let mut motion = *init;
    let mut energy = total_energy(prob, &motion)?;
    let mut trace = vec![energy];
    let mut dampings = Vec::new();
    let mut level = cfg.damping_init;
    let mut flat = 0;
    let mut termination = Termination::MaxSteps;
    for _ in 0..cfg.max_steps {
        let ne = normal_equations(prob, &motion)?;
        ne.check_rank()?;
        let mut accepted = None;
        let mut mu = 0.0;
        loop {
            if let Ok(delta) = ne.step(mu, cfg.step_twist_cap) {
                let candidate = delta.exp()?.compose(&motion);
                if let Ok(e) = total_energy(prob, &candidate) {
                    if e <= energy {
                        accepted = Some((candidate, e));
                        break;
                    }
                }
            }
            mu = if mu == 0.0 { level } else { mu * cfg.damping_factor };
            if mu > cfg.damping_max {
                break;
            }
        }
        let Some((candidate, e)) = accepted else {
            termination = Termination::Stalled;
            break;
        };
        if mu > 0.0 {
            level = (mu / cfg.damping_factor).max(cfg.damping_init);
        }
        let rel = if energy > 0.0 { (energy - e) / energy } else { 0.0 };
        motion = candidate;
        energy = e;
        trace.push(e);
        dampings.push(mu);
        flat = if rel < cfg.plateau_rel_tol { flat + 1 } else { 0 };
        if flat >= cfg.plateau_patience {
            termination = Termination::Plateau;
            break;
        }
    }
    Ok(SolveReport {
        instance_id: prob.instance_id,
        twist: motion.log(),
        motion,
        initial: *init,
        steps: trace.len() - 1,
        energy_trace: trace,
        damping: dampings,
        termination,
        fallback_reason: None,
        pixels: prob.pixels.len(),
        inliers: prob.inlier_count(),
    })
}

/// Term weights per class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeightTable {
    pub background: EnergyWeights,
    pub foreground: EnergyWeights,
}

impl Default for WeightTable {
    fn default() -> Self {
        WeightTable {
            background: EnergyWeights::background(),
            foreground: EnergyWeights::foreground(),
        }
    }
}

impl WeightTable {
    pub fn for_instance(&self, id: u32) -> EnergyWeights {
        if id == 0 {
            self.background
        } else {
            self.foreground
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PipelineConfig {
    pub energy: EnergyConfig,
    pub solver: SolverConfig,
    pub ransac: RansacConfig,
    pub occlusion_threshold: f64,
}

impl PipelineConfig {
    pub fn new() -> Self {
        PipelineConfig {
            occlusion_threshold: OCCLUSION_THRESHOLD,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.energy.robust.validate()?;
        self.solver.validate()?;
        self.ransac.validate()?;
        if !(self.occlusion_threshold > 0.0) {
            return Err(Error::InvalidArgument("occlusion threshold must be > 0".into()));
        }
        Ok(())
    }
}

/// Prune, RANSAC and solve a single instance.
pub fn solve_pipeline(frame: &FrameSet, id: u32, weights: &WeightTable, cfg: &PipelineConfig) -> Result<SolveReport> {
    let mut prob = InstanceProblem::new(frame, id, weights.for_instance(id), cfg.energy)?;
    prob.alpha = prune_occluded(&prob, cfg.occlusion_threshold);
    let init = ransac_init(&prob, &cfg.ransac)?;
    prob.alpha = init.inliers;
    solve_instance(&prob, &init.motion, &cfg.solver)
}

fn fallback(frame: &FrameSet, id: u32, background: &RigidMotion, reason: &Error) -> SolveReport {
    log::warn!("instance {id}: {reason}; using background motion");
    SolveReport {
        instance_id: id,
        motion: *background,
        twist: background.log(),
        initial: *background,
        energy_trace: vec![f64::INFINITY],
        steps: 0,
        damping: Vec::new(),
        termination: Termination::Fallback,
        fallback_reason: Some(reason.to_string()),
        pixels: frame.seg.count(id),
        inliers: 0,
    }
}

/// Solves the background, then every foreground instance (in parallel).
/// Reports are ordered by instance id, background first.
pub fn solve_frame(frame: &FrameSet, weights: &WeightTable, cfg: &PipelineConfig) -> Result<Vec<SolveReport>> {
    frame.validate()?;
    cfg.validate()?;
    let background = solve_pipeline(frame, 0, weights, cfg)?;
    let ids: Vec<u32> = frame.seg.ids().into_iter().filter(|id| *id != 0).collect();
    let foreground: Vec<SolveReport> = ids
        .par_iter()
        .map(|id| match solve_pipeline(frame, *id, weights, cfg) {
            Ok(r) => r,
            Err(e) => fallback(frame, *id, &background.motion, &e),
        })
        .collect();
    let mut reports = Vec::with_capacity(foreground.len() + 1);
    reports.push(background);
    reports.extend(foreground);
    Ok(reports)
}

pub fn motion_map(reports: &[SolveReport]) -> BTreeMap<u32, RigidMotion> {
    reports.iter().map(|r| (r.instance_id, r.motion)).collect()
}
