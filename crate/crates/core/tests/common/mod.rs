#![allow(dead_code)]

use std::collections::HashMap;

use nalgebra::Vector6;
use rigidflow::energy::{flow_block, photometric_block, rigid_block, InstanceProblem, ResidualBlock};
use rigidflow::synth::{self, Rendered};
use rigidflow::{CameraRig, RigidMotion, Twist};

pub fn rig() -> CameraRig {
    CameraRig::new(200.0, 200.0, 160.0, 48.0, 0.54, 320, 96).unwrap()
}

/// The street scene with three cars; `seed` picks the texture.
pub fn clean_scene(seed: u64) -> Rendered {
    let mut spec = synth::street_scene(rig(), 3);
    spec.texture_seed = seed;
    synth::render(&spec, seed).unwrap()
}

/// The street scene with 30% flow outliers and 0.5 px noise on flow and disparity.
pub fn noisy_scene(seed: u64) -> Rendered {
    let mut spec = synth::street_scene(rig(), 3);
    spec.texture_seed = seed;
    spec.noise.disparity = 0.5;
    spec.noise.flow = 0.5;
    spec.outlier_fraction = 0.3;
    synth::render(&spec, seed).unwrap()
}

/// Restricts the problem to correspondences that `gt` maps exactly.
pub fn exact_cues(prob: &mut InstanceProblem, gt: &RigidMotion) {
    prob.alpha = prob
        .pixels
        .iter()
        .map(|p| p.point1.is_some_and(|x1| (gt.transform_point(&p.point0) - x1).norm() < 1e-9))
        .collect();
}

/// Translation error (m) and rotation error (rad).
pub fn motion_error(est: &RigidMotion, gt: &RigidMotion) -> (f64, f64) {
    (
        (est.translation() - gt.translation()).norm(),
        est.inverse().compose(gt).rotation_angle(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Term {
    Photometric,
    Rigid,
    Flow,
}

pub fn block(term: Term, prob: &InstanceProblem, m: &RigidMotion) -> ResidualBlock {
    match term {
        Term::Photometric => photometric_block(prob, m),
        Term::Rigid => rigid_block(prob, m),
        Term::Flow => flow_block(prob, m),
    }
}

/// Relative Frobenius error between the analytic Jacobian at `m` and central
/// differences of the residuals under left perturbations of size `h`, over
/// the rows present at `m` and at every perturbed pose. `None` if no rows.
pub fn jacobian_error(term: Term, prob: &InstanceProblem, m: &RigidMotion, h: f64) -> Option<f64> {
    jacobian_error_with(term, prob, m, h, false)
}

/// As [`jacobian_error`]; with `skip_kinks`, rows whose forward and backward
/// differences disagree (the step crossed a derivative discontinuity of a
/// piecewise interpolant) are left out.
pub fn jacobian_error_with(term: Term, prob: &InstanceProblem, m: &RigidMotion, h: f64, skip_kinks: bool) -> Option<f64> {
    let base = block(term, prob, m);
    let key = |b: &ResidualBlock, i: usize| (b.pixel[i], b.component[i]);
    let mut fd: Vec<Option<Vector6<f64>>> = vec![Some(Vector6::zeros()); base.len()];
    for k in 0..6 {
        let mut e = [0.0; 6];
        e[k] = h;
        let plus = Twist::from_slice(&e).exp().unwrap().compose(m);
        e[k] = -h;
        let minus = Twist::from_slice(&e).exp().unwrap().compose(m);
        let (bp, bm) = (block(term, prob, &plus), block(term, prob, &minus));
        let index = |b: &ResidualBlock| -> HashMap<(usize, u8), f64> {
            (0..b.len()).map(|i| (key(b, i), b.residuals[i])).collect()
        };
        let (ip, im) = (index(&bp), index(&bm));
        for (i, slot) in fd.iter_mut().enumerate() {
            let Some(col) = slot else { continue };
            match (ip.get(&key(&base, i)), im.get(&key(&base, i))) {
                (Some(rp), Some(rm)) => {
                    let (fwd, bwd) = ((rp - base.residuals[i]) / h, (base.residuals[i] - rm) / h);
                    if skip_kinks && (fwd - bwd).abs() > 1e-3 * (fwd.abs() + bwd.abs()) + 1e-6 {
                        *slot = None;
                    } else {
                        col[k] = (rp - rm) / (2.0 * h);
                    }
                }
                _ => *slot = None,
            }
        }
    }
    let (mut num, mut den) = (0.0, 0.0);
    let mut rows = 0;
    for (i, col) in fd.iter().enumerate() {
        let Some(col) = col else { continue };
        let a = base.jacobians[i].transpose();
        num += (a - col).norm_squared();
        den += col.norm_squared();
        rows += 1;
    }
    (rows > 0 && den > 0.0).then(|| (num / den).sqrt())
}
