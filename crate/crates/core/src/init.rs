//! Pre-solve stage: occlusion pruning, closed-form rigid fitting and
//! multi-run RANSAC initialization.

use nalgebra::{Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::energy::{energy_breakdown, InstanceProblem};
use crate::error::{Error, Result};
use crate::geometry::{RigidMotion, Twist, Vec3};

/// Default disparity-change threshold for occlusion pruning, in pixels.
pub const OCCLUSION_THRESHOLD: f64 = 30.0;

/// A frame-0 point and its frame-1 correspondence.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence3D {
    pub x0: Vec3,
    pub x1: Vec3,
    pub pixel: (usize, usize),
}

/// Correspondences of the problem's inlier pixels, with their pixel index.
pub fn correspondences(prob: &InstanceProblem) -> Vec<(usize, Correspondence3D)> {
    prob.pixels
        .iter()
        .enumerate()
        .filter(|(k, _)| prob.alpha[*k])
        .filter_map(|(k, px)| {
            px.point1.map(|x1| {
                (
                    k,
                    Correspondence3D {
                        x0: px.point0,
                        x1,
                        pixel: (px.x, px.y),
                    },
                )
            })
        })
        .collect()
}

/// Inlier mask after dropping pixels whose frame-1 disparity at `p + F(p)`
/// differs from `D0(p)` by more than `threshold`, or cannot be looked up.
pub fn prune_occluded(prob: &InstanceProblem, threshold: f64) -> Vec<bool> {
    let disp0 = &prob.frame.disp0;
    prob.pixels
        .iter()
        .zip(&prob.alpha)
        .map(|(px, keep)| {
            *keep
                && match (px.disp1_at_flow, disp0.get(px.x, px.y)) {
                    (Some(d1), Some(d0)) => (d1 - d0).abs() <= threshold,
                    _ => false,
                }
        })
        .collect()
}

/// Least-squares rigid alignment `x1 ≈ R x0 + t` (Kabsch with reflection
/// correction).
pub fn fit_rigid_motion(corrs: &[Correspondence3D]) -> Result<RigidMotion> {
    if corrs.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: corrs.len(),
        });
    }
    let n = corrs.len() as f64;
    let c0 = corrs.iter().fold(Vec3::zeros(), |a, c| a + c.x0) / n;
    let c1 = corrs.iter().fold(Vec3::zeros(), |a, c| a + c.x1) / n;
    let mut cov = Matrix3::zeros();
    for c in corrs {
        cov += (c.x0 - c0) * (c.x1 - c1).transpose();
    }
    let svd = cov.svd(true, true);
    let mut s: Vec<f64> = svd.singular_values.iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    // Rank < 2 means collinear or coincident points.
    if !(s[0] > 0.0) || s[1] <= 1e-12 * s[0] {
        return Err(Error::DegenerateGeometry(
            "cross-covariance has rank < 2 (collinear or coincident points)".into(),
        ));
    }
    let u = svd.u.ok_or(Error::NonFinite("svd"))?;
    let v_t = svd.v_t.ok_or(Error::NonFinite("svd"))?;
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant().signum();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d)) * u.transpose();
    let t = c1 - r * c0;
    RigidMotion::new(r, t)
}

/// [`fit_rigid_motion`] returned as a twist.
pub fn fit_rigid_least_squares(corrs: &[Correspondence3D]) -> Result<Twist> {
    Ok(fit_rigid_motion(corrs)?.log())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RansacConfig {
    pub iterations_per_run: usize,
    pub runs: usize,
    /// 3D transfer distance below which a correspondence is an inlier, meters.
    pub inlier_threshold: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            iterations_per_run: 200,
            runs: 5,
            inlier_threshold: 0.15,
            seed: 0,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations_per_run == 0 || self.runs == 0 || !(self.inlier_threshold > 0.0) {
            return Err(Error::InvalidArgument(format!("bad RANSAC config {self:?}")));
        }
        Ok(())
    }
}

/// Outcome of one RANSAC run.
#[derive(Clone, Debug, PartialEq)]
pub struct RansacRun {
    pub motion: RigidMotion,
    pub inlier_count: usize,
    /// Largest inlier count among this run's minimal samples.
    pub best_sample_count: usize,
    /// Mean energy per residual row, used to rank runs.
    pub mean_energy: f64,
}

/// Independent random stream per (seed, instance, run).
pub fn stream_seed(seed: u64, instance: u32, run: usize) -> u64 {
    let mut z = seed
        ^ (instance as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (run as u64).wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    // splitmix64 finalizer
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn transfer_error(m: &RigidMotion, c: &Correspondence3D) -> f64 {
    (m.transform_point(&c.x0) - c.x1).norm()
}

fn count_inliers(m: &RigidMotion, corrs: &[Correspondence3D], threshold: f64) -> usize {
    corrs.iter().filter(|c| transfer_error(m, c) < threshold).count()
}

fn single_run<S>(corrs: &[Correspondence3D], cfg: &RansacConfig, instance: u32, run: usize, score: &S) -> Option<RansacRun>
where
    S: Fn(&RigidMotion) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, instance, run));
    let mut best: Option<(RigidMotion, usize)> = None;
    for _ in 0..cfg.iterations_per_run {
        let picks = sample(&mut rng, corrs.len(), 3);
        let minimal: Vec<Correspondence3D> = picks.iter().map(|k| corrs[k]).collect();
        let Ok(m) = fit_rigid_motion(&minimal) else { continue };
        let count = count_inliers(&m, corrs, cfg.inlier_threshold);
        if best.is_none_or(|(_, c)| count > c) {
            best = Some((m, count));
        }
    }
    let (sample_motion, best_sample_count) = best?;
    if best_sample_count < 3 {
        return None;
    }
    let consensus: Vec<Correspondence3D> = corrs
        .iter()
        .filter(|c| transfer_error(&sample_motion, c) < cfg.inlier_threshold)
        .copied()
        .collect();
    let (motion, inlier_count) = match fit_rigid_motion(&consensus) {
        Ok(refit) => {
            let n = count_inliers(&refit, corrs, cfg.inlier_threshold);
            if n >= best_sample_count {
                (refit, n)
            } else {
                (sample_motion, best_sample_count)
            }
        }
        Err(_) => (sample_motion, best_sample_count),
    };
    Some(RansacRun {
        motion,
        inlier_count,
        best_sample_count,
        mean_energy: score(&motion),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RansacFit {
    pub motion: RigidMotion,
    /// Per correspondence.
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    pub selected_run: usize,
    pub runs: Vec<Option<RansacRun>>,
}

/// Multi-run RANSAC over raw correspondences. Each run's model is ranked by
/// `score` (lower is better); ties go to the earlier run.
pub fn ransac<S>(corrs: &[Correspondence3D], cfg: &RansacConfig, instance: u32, score: S) -> Result<RansacFit>
where
    S: Fn(&RigidMotion) -> f64 + Sync,
{
    cfg.validate()?;
    if corrs.len() < 3 {
        return Err(Error::TooFewPoints {
            needed: 3,
            got: corrs.len(),
        });
    }
    let runs: Vec<Option<RansacRun>> = (0..cfg.runs)
        .into_par_iter()
        .map(|run| single_run(corrs, cfg, instance, run, &score))
        .collect();
    let (selected_run, best) = runs
        .iter()
        .enumerate()
        .filter_map(|(k, r)| r.as_ref().map(|r| (k, r)))
        .min_by(|a, b| a.1.mean_energy.total_cmp(&b.1.mean_energy).then(a.0.cmp(&b.0)))
        .ok_or_else(|| Error::DegenerateGeometry(format!("instance {instance}: no RANSAC consensus")))?;
    let motion = best.motion;
    let inliers: Vec<bool> = corrs
        .iter()
        .map(|c| transfer_error(&motion, c) < cfg.inlier_threshold)
        .collect();
    Ok(RansacFit {
        motion,
        inlier_count: best.inlier_count,
        inliers,
        selected_run,
        runs,
    })
}

/// RANSAC on the problem's current inliers; runs are ranked by mean energy
/// per residual row. The returned mask is per problem pixel.
pub fn ransac_init(prob: &InstanceProblem, cfg: &RansacConfig) -> Result<RansacFit> {
    let indexed = correspondences(prob);
    let corrs: Vec<Correspondence3D> = indexed.iter().map(|(_, c)| *c).collect();
    let fit = ransac(&corrs, cfg, prob.instance_id, |m| {
        energy_breakdown(prob, m).map(|e| e.mean()).unwrap_or(f64::INFINITY)
    })?;
    let mut inliers = vec![false; prob.pixels.len()];
    for ((k, _), keep) in indexed.iter().zip(&fit.inliers) {
        inliers[*k] = *keep;
    }
    Ok(RansacFit { inliers, ..fit })
}
