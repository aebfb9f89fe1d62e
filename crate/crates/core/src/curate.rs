//! Ground-truth curation: per-instance least-squares motions from GT cues,
//! boundary reassignment of mislabeled pixels and scale-drift detection.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::{Error, Result};
use crate::frameio::{write_instance_png, GroundTruthFrame, InstanceMask};
use crate::geometry::{Pixel, RigidMotion, Twist, Vec3};
use crate::init::{fit_rigid_motion, Correspondence3D};

/// Fewest points for which a covariance spectrum is considered stable.
pub const MIN_SCALE_POINTS: usize = 10;
/// Points sampled for the pairwise-distance check.
const PAIRWISE_SAMPLE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurationConfig {
    pub boundary_band_px: usize,
    pub reassign_margin: f64,
    /// Tolerance on the geometric scale factor `sqrt(λmax1 / λmax0)`.
    pub scale_tol: f64,
    pub refit_rounds: usize,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            boundary_band_px: 3,
            reassign_margin: 1.2,
            scale_tol: 0.05,
            refit_rounds: 2,
        }
    }
}

impl CurationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.boundary_band_px < 1
            || !(self.reassign_margin >= 1.0)
            || !(self.scale_tol > 0.0 && self.scale_tol < 1.0)
        {
            return Err(Error::InvalidArgument(format!("bad curation config {self:?}")));
        }
        Ok(())
    }
}

/// Frame-0 point and its frame-1 position from GT disparity and flow; `disp1`
/// lives on the frame-0 grid so no interpolation is involved.
pub fn lift(gt: &GroundTruthFrame, x: usize, y: usize) -> Option<Correspondence3D> {
    let d0 = gt.disp0.get(x, y)?;
    let d1 = gt.disp1.get(x, y)?;
    let (u, v) = gt.flow.get(x, y)?;
    let p = Pixel::new(x as f64, y as f64);
    let x0 = gt.rig.back_project(&p, d0).ok()?;
    let x1 = gt.rig.back_project(&Pixel::new(p.x + u, p.y + v), d1).ok()?;
    Some(Correspondence3D { x0, x1, pixel: (x, y) })
}

fn lift_all(gt: &GroundTruthFrame) -> Vec<Option<Correspondence3D>> {
    let w = gt.rig.width;
    (0..w * gt.rig.height).map(|i| lift(gt, i % w, i / w)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InstanceFit {
    pub motion: RigidMotion,
    /// Root-mean-square 3D transfer error, meters.
    pub rms: f64,
    pub points: usize,
}

fn transfer_sq(m: &RigidMotion, c: &Correspondence3D) -> f64 {
    (m.transform_point(&c.x0) - c.x1).norm_squared()
}

fn fit_points(corrs: &[Correspondence3D]) -> Result<InstanceFit> {
    let motion = fit_rigid_motion(corrs)?;
    let sse: f64 = corrs.iter().map(|c| transfer_sq(&motion, c)).sum();
    Ok(InstanceFit {
        motion,
        rms: (sse / corrs.len() as f64).sqrt(),
        points: corrs.len(),
    })
}

fn instance_points(mask: &InstanceMask, lifted: &[Option<Correspondence3D>], id: u32) -> Vec<Correspondence3D> {
    mask.labels
        .iter()
        .zip(lifted)
        .filter(|(l, _)| **l == id)
        .filter_map(|(_, c)| *c)
        .collect()
}

/// Least-squares motion of every instance in `mask`; `None` for instances with
/// fewer than three usable, non-collinear correspondences.
pub fn fit_instances(gt: &GroundTruthFrame, mask: &InstanceMask) -> BTreeMap<u32, Option<InstanceFit>> {
    let lifted = lift_all(gt);
    fit_with(mask, &lifted, &mask.ids())
}

fn fit_with(mask: &InstanceMask, lifted: &[Option<Correspondence3D>], ids: &[u32]) -> BTreeMap<u32, Option<InstanceFit>> {
    ids.iter()
        .map(|id| (*id, fit_points(&instance_points(mask, lifted, *id)).ok()))
        .collect()
}

fn total_sse(mask: &InstanceMask, lifted: &[Option<Correspondence3D>], fits: &BTreeMap<u32, Option<InstanceFit>>) -> f64 {
    mask.labels
        .iter()
        .zip(lifted)
        .filter_map(|(l, c)| {
            let fit = fits.get(l).copied().flatten()?;
            Some(transfer_sq(&fit.motion, c.as_ref()?))
        })
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Reassignment {
    pub mask: InstanceMask,
    pub fits: BTreeMap<u32, Option<InstanceFit>>,
    /// `(pixel index, from, to)` in application order.
    pub moves: Vec<(usize, u32, u32)>,
    /// Summed squared transfer error before the first round and after each round.
    pub sse: Vec<f64>,
}

/// Moves pixels near a differently-labeled instance to that instance when its
/// motion explains the pixel's 3D displacement at least `reassign_margin`
/// times better, then refits touched instances; repeated up to
/// `refit_rounds` times or until nothing moves.
pub fn reassign_boundary(
    gt: &GroundTruthFrame,
    mask: &InstanceMask,
    fits: &BTreeMap<u32, Option<InstanceFit>>,
    cfg: &CurationConfig,
) -> Result<Reassignment> {
    cfg.validate()?;
    let lifted = lift_all(gt);
    let (w, h) = (mask.width, mask.height);
    let band = cfg.boundary_band_px as i64;
    let mut mask = mask.clone();
    let mut fits = fits.clone();
    let mut moves = Vec::new();
    let mut sse = vec![total_sse(&mask, &lifted, &fits)];
    for _ in 0..cfg.refit_rounds {
        let mut round = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let own = mask.labels[i];
                let Some(c) = &lifted[i] else { continue };
                let Some(own_fit) = fits.get(&own).copied().flatten() else { continue };
                let mut neighbors = BTreeSet::new();
                for ny in (y as i64 - band).max(0)..=(y as i64 + band).min(h as i64 - 1) {
                    for nx in (x as i64 - band).max(0)..=(x as i64 + band).min(w as i64 - 1) {
                        let l = mask.labels[ny as usize * w + nx as usize];
                        if l != own {
                            neighbors.insert(l);
                        }
                    }
                }
                let own_err = transfer_sq(&own_fit.motion, c).sqrt();
                let best = neighbors
                    .iter()
                    .filter_map(|l| Some((*l, transfer_sq(&fits.get(l).copied().flatten()?.motion, c).sqrt())))
                    .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                if let Some((to, err)) = best {
                    if err * cfg.reassign_margin < own_err {
                        round.push((i, own, to));
                    }
                }
            }
        }
        if round.is_empty() {
            break;
        }
        let mut touched = BTreeSet::new();
        for &(i, from, to) in &round {
            mask.labels[i] = to;
            touched.insert(from);
            touched.insert(to);
        }
        let touched: Vec<u32> = touched.into_iter().collect();
        fits.extend(fit_with(&mask, &lifted, &touched));
        moves.extend(round);
        sse.push(total_sse(&mask, &lifted, &fits));
    }
    Ok(Reassignment { mask, fits, moves, sse })
}

/// Eigenvalues of the point covariance, largest first.
pub fn covariance_eigenvalues(points: &[Vec3]) -> [f64; 3] {
    let n = points.len().max(1) as f64;
    let mean = points.iter().fold(Vec3::zeros(), |a, p| a + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let mut e: [f64; 3] = SymmetricEigen::new(cov).eigenvalues.into();
    e.sort_by(|a, b| b.total_cmp(a));
    e
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ScaleFlag {
    Rigid,
    Scaled,
    /// Too few points for a stable covariance.
    Indeterminate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScaleCheck {
    pub flag: ScaleFlag,
    pub points: usize,
    /// `λmax(frame 1) / λmax(frame 0)`.
    pub eigen_ratio: f64,
    /// `sqrt(eigen_ratio)`, the geometric scale factor.
    pub scale_ratio: f64,
    /// Largest relative change of pairwise 3D distances over a point sample.
    pub pairwise_change: f64,
}

/// Compares the covariance spectra of corresponding frame-0 and frame-1 points.
pub fn scale_check(points0: &[Vec3], points1: &[Vec3], scale_tol: f64) -> Result<ScaleCheck> {
    if points0.len() != points1.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {} points", points0.len(), points1.len())));
    }
    let n = points0.len();
    if n < MIN_SCALE_POINTS {
        return Ok(ScaleCheck {
            flag: ScaleFlag::Indeterminate,
            points: n,
            eigen_ratio: f64::NAN,
            scale_ratio: f64::NAN,
            pairwise_change: f64::NAN,
        });
    }
    let e0 = covariance_eigenvalues(points0)[0];
    let e1 = covariance_eigenvalues(points1)[0];
    if !(e0 > 0.0) {
        return Err(Error::DegenerateGeometry("instance points are coincident".into()));
    }
    let eigen_ratio = e1 / e0;
    let scale_ratio = eigen_ratio.sqrt();
    let step = n.div_ceil(PAIRWISE_SAMPLE);
    let sample: Vec<usize> = (0..n).step_by(step).collect();
    let mut pairwise_change: f64 = 0.0;
    for (a, &i) in sample.iter().enumerate() {
        for &j in &sample[a + 1..] {
            let d0 = (points0[i] - points0[j]).norm();
            if d0 > 0.0 {
                let d1 = (points1[i] - points1[j]).norm();
                pairwise_change = pairwise_change.max((d1 - d0).abs() / d0);
            }
        }
    }
    let flag = if (scale_ratio - 1.0).abs() > scale_tol {
        ScaleFlag::Scaled
    } else {
        ScaleFlag::Rigid
    };
    Ok(ScaleCheck {
        flag,
        points: n,
        eigen_ratio,
        scale_ratio,
        pairwise_change,
    })
}

/// [`scale_check`] on one instance's GT correspondences.
pub fn detect_scale_drift(gt: &GroundTruthFrame, mask: &InstanceMask, id: u32, scale_tol: f64) -> Result<ScaleCheck> {
    let (p0, p1): (Vec<Vec3>, Vec<Vec3>) = instance_points(mask, &lift_all(gt), id)
        .into_iter()
        .map(|c| (c.x0, c.x1))
        .unzip();
    scale_check(&p0, &p1, scale_tol)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CuratedInstance {
    pub instance_id: u32,
    pub twist: Option<Twist>,
    pub rms: Option<f64>,
    pub pixels: usize,
    pub reassigned_in: usize,
    pub reassigned_out: usize,
    pub scale: ScaleCheck,
}

impl CuratedInstance {
    pub fn is_degenerate(&self) -> bool {
        self.twist.is_none()
    }

    /// Degenerate or scale-drifted instances are dropped from the labels.
    pub fn is_pruned(&self) -> bool {
        self.is_degenerate() || self.scale.flag == ScaleFlag::Scaled
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Curation {
    pub mask: InstanceMask,
    pub instances: Vec<CuratedInstance>,
    pub moves: Vec<(usize, u32, u32)>,
    pub sse: Vec<f64>,
}

/// Fit, reassign boundaries, then check every instance for scale drift.
pub fn curate(gt: &GroundTruthFrame, cfg: &CurationConfig) -> Result<Curation> {
    cfg.validate()?;
    gt.validate()?;
    let fits = fit_instances(gt, &gt.seg);
    let r = reassign_boundary(gt, &gt.seg, &fits, cfg)?;
    let mut ids: BTreeSet<u32> = gt.seg.ids().into_iter().collect();
    ids.extend(r.mask.ids());
    let mut instances = Vec::with_capacity(ids.len());
    for id in ids {
        let fit = r.fits.get(&id).copied().flatten();
        let (mut moved_in, mut moved_out) = (0, 0);
        for (a, b) in gt.seg.labels.iter().zip(&r.mask.labels) {
            moved_in += (*a != id && *b == id) as usize;
            moved_out += (*a == id && *b != id) as usize;
        }
        instances.push(CuratedInstance {
            instance_id: id,
            twist: fit.map(|f| f.motion.log()),
            rms: fit.map(|f| f.rms),
            pixels: r.mask.count(id),
            reassigned_in: moved_in,
            reassigned_out: moved_out,
            scale: detect_scale_drift(gt, &r.mask, id, cfg.scale_tol)?,
        });
    }
    Ok(Curation {
        mask: r.mask,
        instances,
        moves: r.moves,
        sse: r.sse,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |v| format!("{v:?}"))
}

impl Curation {
    /// One line per instance: id, six twist entries, RMS, reassigned-in,
    /// reassigned-out, scale flag and scale ratio.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# id vx vy vz wx wy wz rms_m in out scale_flag scale_ratio\n");
        for inst in &self.instances {
            let twist: Vec<String> = match inst.twist {
                Some(t) => t.to_array().iter().map(|v| format!("{v:?}")).collect(),
                None => vec!["nan".into(); 6],
            };
            let flag = match inst.scale.flag {
                ScaleFlag::Rigid => "0",
                ScaleFlag::Scaled => "1",
                ScaleFlag::Indeterminate => "na",
            };
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {}",
                inst.instance_id,
                twist.join(" "),
                fmt_opt(inst.rms),
                inst.reassigned_in,
                inst.reassigned_out,
                flag,
                fmt_opt(Some(inst.scale.scale_ratio).filter(|v| v.is_finite()))
            );
        }
        s
    }

    /// Writes `curated/<id>.txt` and the updated mask to `instance/<id>.png`.
    pub fn write(&self, root: impl AsRef<Path>, id: &str) -> Result<()> {
        let root = root.as_ref();
        let text = curated_path(root, id);
        if let Some(dir) = text.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&text, self.to_text()).map_err(|e| Error::io(&text, e))?;
        write_instance_png(&self.mask, root.join("instance").join(format!("{id}.png")))
    }
}

pub fn curated_path(root: impl AsRef<Path>, id: &str) -> PathBuf {
    root.as_ref().join("curated").join(format!("{id}.txt"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraRig;
    use crate::synth::{self, Rendered};

    fn rig() -> CameraRig {
        CameraRig::new(200.0, 200.0, 80.0, 30.0, 0.54, 160, 60).unwrap()
    }

    fn scene() -> Rendered {
        synth::render(&synth::street_scene(rig(), 3), 0).unwrap()
    }

    #[test]
    fn fits_match_generating_motions() {
        let r = scene();
        let fits = fit_instances(&r.gt, &r.gt.seg);
        for (id, gt) in &r.motions {
            let f = fits[id].unwrap();
            assert!((f.motion.log().to_vector() - gt.log().to_vector()).amax() < 1e-9, "instance {id}");
            assert!(f.rms < 1e-9);
        }
    }

    #[test]
    fn invalid_flow_is_degenerate() {
        let mut r = scene();
        for (i, l) in r.gt.seg.labels.iter().enumerate() {
            if *l == 2 {
                r.gt.flow.valid[i] = false;
            }
        }
        let fits = fit_instances(&r.gt, &r.gt.seg);
        assert!(fits[&2].is_none());
        let c = curate(&r.gt, &CurationConfig::default()).unwrap();
        let inst = c.instances.iter().find(|i| i.instance_id == 2).unwrap();
        assert!(inst.is_degenerate() && inst.is_pruned());
    }

    #[test]
    fn identical_motions_fit_identically() {
        let mut spec = synth::street_scene(rig(), 2);
        spec.objects[1].motion = spec.objects[0].motion;
        spec.objects[1].pose = RigidMotion::new(*spec.objects[0].pose.rotation(), spec.objects[1].pose.translation().clone_owned()).unwrap();
        let r = synth::render(&spec, 0).unwrap();
        // Same body twist and orientation but different position: compare in the body frame.
        let fits = fit_instances(&r.gt, &r.gt.seg);
        let body = |id: u32, k: usize| {
            let pose = spec.objects[k].pose;
            let bg = spec.background_motion().unwrap();
            pose.inverse().compose(&bg.inverse()).compose(&fits[&id].unwrap().motion).compose(&pose).log()
        };
        assert!((body(1, 0).to_vector() - body(2, 1).to_vector()).amax() < 1e-9);
    }

    #[test]
    fn clean_mask_is_left_alone() {
        let r = scene();
        let c = curate(&r.gt, &CurationConfig::default()).unwrap();
        assert!(c.moves.is_empty());
        assert_eq!(c.mask, r.gt.seg);
        assert!(c.instances.iter().all(|i| i.scale.flag == ScaleFlag::Rigid));
    }

    fn eligible(r: &Rendered) -> Vec<bool> {
        (0..r.gt.seg.labels.len())
            .map(|i| lift(&r.gt, i % r.gt.rig.width, i / r.gt.rig.width).is_some())
            .collect()
    }

    #[test]
    fn rims_are_recovered() {
        for rim in 1..=3 {
            let mut r = scene();
            let (bad, injected) = synth::mislabel_rims(&r.gt.seg, rim, &eligible(&r));
            let truth = std::mem::replace(&mut r.gt.seg, bad);
            let c = curate(&r.gt, &CurationConfig::default()).unwrap();
            let injected: BTreeSet<usize> = injected.into_iter().collect();
            let recovered = injected.iter().filter(|i| c.mask.labels[**i] == truth.labels[**i]).count();
            assert!(recovered as f64 >= 0.95 * injected.len() as f64, "rim {rim}: {recovered}/{}", injected.len());
            for (i, _, _) in &c.moves {
                assert!(injected.contains(i), "rim {rim}: interior pixel {i} moved");
            }
            for w in c.sse.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12));
            }
            let again = curate(
                &GroundTruthFrame {
                    seg: c.mask.clone(),
                    ..r.gt.clone()
                },
                &CurationConfig::default(),
            )
            .unwrap();
            assert!(again.moves.is_empty(), "rim {rim}: not idempotent");
        }
    }

    #[test]
    fn band_limits_reassignment() {
        let mut r = scene();
        let w = r.gt.rig.width;
        // A bg pixel far from any object relabeled as object 1 stays put.
        let far = (0..r.gt.seg.labels.len())
            .find(|i| {
                let (x, y) = (i % w, i / w);
                lift(&r.gt, x, y).is_some()
                    && (y.saturating_sub(5)..(y + 6).min(r.gt.rig.height))
                        .all(|yy| (x.saturating_sub(5)..(x + 6).min(w)).all(|xx| r.gt.seg.get(xx, yy) == 0))
            })
            .unwrap();
        r.gt.seg.labels[far] = 1;
        let fits = fit_instances(&r.gt, &r.gt.seg);
        let cfg = CurationConfig::default();
        let out = reassign_boundary(&r.gt, &r.gt.seg, &fits, &cfg).unwrap();
        // The lone pixel sees background within the band and returns to it.
        assert_eq!(out.mask.labels[far], 0);
        // Within the lone pixel's window nothing else changes.
        assert_eq!(out.moves.len(), 1);
    }

    #[test]
    fn interior_pixels_stay_even_when_mismoving() {
        let mut r = scene();
        let w = r.gt.rig.width;
        let band = CurationConfig::default().boundary_band_px;
        let inside = (0..r.gt.seg.labels.len())
            .find(|i| {
                let (x, y) = (i % w, i / w);
                let b = band + 1;
                x >= b
                    && y >= b
                    && lift(&r.gt, x, y).is_some()
                    && (y - b..=(y + b).min(r.gt.rig.height - 1))
                        .all(|yy| (x - b..=(x + b).min(w - 1)).all(|xx| r.gt.seg.get(xx, yy) == 1))
            })
            .unwrap();
        // Give the pixel the background's flow so the background explains it best.
        let (x, y) = (inside % w, inside / w);
        let c = lift(&r.gt, x, y).unwrap();
        let moved = r.motions[0].1.transform_point(&c.x0);
        let q = r.gt.rig.project(&moved).unwrap();
        r.gt.flow.set(x, y, Some((q.x - x as f64, q.y - y as f64)));
        r.gt.disp1.set(x, y, Some(r.gt.rig.disparity_of(&moved).unwrap()));
        let c = curate(&r.gt, &CurationConfig::default()).unwrap();
        assert_eq!(c.mask.labels[inside], 1);
    }

    #[test]
    fn scale_drift_flags() {
        let mut spec = synth::street_scene(rig(), 2);
        spec.objects[0].scale_change = 1.07;
        let r = synth::render(&spec, 0).unwrap();
        let s = detect_scale_drift(&r.gt, &r.gt.seg, 1, 0.05).unwrap();
        assert_eq!(s.flag, ScaleFlag::Scaled);
        assert!((s.scale_ratio - 1.07).abs() < 0.02, "{s:?}");
        assert!((s.eigen_ratio - 1.07f64.powi(2)).abs() < 0.04);
        assert!(s.pairwise_change > 0.05);
        let rigid = detect_scale_drift(&r.gt, &r.gt.seg, 2, 0.05).unwrap();
        assert_eq!(rigid.flag, ScaleFlag::Rigid);
        assert!((rigid.eigen_ratio - 1.0).abs() < 1e-9);
        assert!(rigid.pairwise_change < 1e-9);
    }

    #[test]
    fn scale_check_is_rigid_invariant() {
        let pts: Vec<Vec3> = (0..50)
            .map(|k| {
                let t = k as f64;
                Vec3::new(t.sin() * 2.0, (0.3 * t).cos(), 10.0 + 0.1 * t)
            })
            .collect();
        let m = Twist::from_slice(&[0.3, -1.0, 2.0, 0.4, 0.1, -0.7]).exp().unwrap();
        let moved: Vec<Vec3> = pts.iter().map(|p| m.transform_point(p)).collect();
        let (a, b) = (covariance_eigenvalues(&pts), covariance_eigenvalues(&moved));
        for k in 0..3 {
            assert!((a[k] - b[k]).abs() < 1e-9);
        }
        assert_eq!(scale_check(&pts, &moved, 0.05).unwrap().flag, ScaleFlag::Rigid);
        let five = scale_check(&pts[..5], &moved[..5], 0.05).unwrap();
        assert_eq!(five.flag, ScaleFlag::Indeterminate);
    }

    #[test]
    fn text_output() {
        let r = scene();
        let c = curate(&r.gt, &CurationConfig::default()).unwrap();
        let text = c.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 1 + c.instances.len());
        let fields: Vec<&str> = lines[1].split(' ').collect();
        assert_eq!(fields.len(), 12);
        assert_eq!(fields[0], "0");
        assert_eq!(fields[10], "0");
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path(), "000007").unwrap();
        assert_eq!(std::fs::read_to_string(curated_path(dir.path(), "000007")).unwrap(), text);
    }
}
