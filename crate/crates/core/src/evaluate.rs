//! Scene-flow composition from per-instance motions, KITTI-style outlier
//! metrics, motion errors and background odometry.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::frameio::{
    read_disparity_png, read_flow_png, read_instance_png, read_motions, write_disparity_png, write_flow_png,
    write_instance_png, write_motions, FlowField, FramePaths, GroundTruthFrame, InstanceMask, ScalarField,
};
use crate::geometry::{CameraRig, Pixel, RigidMotion, Twist, Z_MIN};

/// Dense scene flow: frame-0 disparity, disparity of the moved point on the
/// frame-0 grid, and rigid optical flow.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFlowField {
    pub disp0: ScalarField,
    pub disp_warp: ScalarField,
    pub rigid_flow: FlowField,
    pub motions: BTreeMap<u32, Twist>,
    pub seg: InstanceMask,
}

impl SceneFlowField {
    pub fn width(&self) -> usize {
        self.disp0.width
    }

    pub fn height(&self) -> usize {
        self.disp0.height
    }
}

/// Moves every valid `D0` pixel with its instance's motion.
pub fn compose_scene_flow(
    rig: &CameraRig,
    disp0: &ScalarField,
    seg: &InstanceMask,
    motions: &BTreeMap<u32, RigidMotion>,
) -> Result<SceneFlowField> {
    let (w, h) = (disp0.width, disp0.height);
    if seg.width != w || seg.height != h || rig.width != w || rig.height != h {
        return Err(Error::DimensionMismatch(format!(
            "disparity {w}x{h}, mask {}x{}, rig {}x{}",
            seg.width, seg.height, rig.width, rig.height
        )));
    }
    for id in seg.ids() {
        if !motions.contains_key(&id) {
            return Err(Error::MissingMotion(id));
        }
    }
    let mut disp_warp = ScalarField::invalid(w, h);
    let mut rigid_flow = FlowField::invalid(w, h);
    let fb = rig.focal_baseline();
    for y in 0..h {
        for x in 0..w {
            let Some(d) = disp0.get(x, y) else { continue };
            let p = Pixel::new(x as f64, y as f64);
            let Ok(point) = rig.back_project(&p, d) else { continue };
            let moved = motions[&seg.get(x, y)].transform_point(&point);
            if !(moved.z > Z_MIN) {
                continue;
            }
            let q = rig.project(&moved)?;
            disp_warp.set(x, y, Some(fb / moved.z));
            rigid_flow.set(x, y, Some((q.x - p.x, q.y - p.y)));
        }
    }
    Ok(SceneFlowField {
        disp0: disp0.clone(),
        disp_warp,
        rigid_flow,
        motions: motions.iter().map(|(id, m)| (*id, m.log())).collect(),
        seg: seg.clone(),
    })
}

/// KITTI rule: error above 3 px and above 5% of the ground-truth magnitude.
#[inline]
pub fn is_outlier(error: f64, magnitude: f64) -> bool {
    error > 3.0 && error > 0.05 * magnitude
}

/// Outlier and scored-pixel counts of one split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OutlierCounts {
    pub d1: (usize, usize),
    pub d2: (usize, usize),
    pub fl: (usize, usize),
    pub sf: (usize, usize),
}

impl OutlierCounts {
    fn add(&mut self, other: &OutlierCounts) {
        for (a, b) in [
            (&mut self.d1, other.d1),
            (&mut self.d2, other.d2),
            (&mut self.fl, other.fl),
            (&mut self.sf, other.sf),
        ] {
            a.0 += b.0;
            a.1 += b.1;
        }
    }

    fn percent((bad, total): (usize, usize)) -> f64 {
        if total == 0 {
            0.0
        } else {
            100.0 * bad as f64 / total as f64
        }
    }

    /// `[D1, D2, Fl, SF]` in percent.
    pub fn percentages(&self) -> [f64; 4] {
        [self.d1, self.d2, self.fl, self.sf].map(Self::percent)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct OutlierTable {
    pub bg: OutlierCounts,
    pub fg: OutlierCounts,
    pub all: OutlierCounts,
}

impl OutlierTable {
    /// Adds the counts of `other`, giving pixel-weighted aggregate rates.
    pub fn merge(&mut self, other: &OutlierTable) {
        self.bg.add(&other.bg);
        self.fg.add(&other.fg);
        self.all.add(&other.all);
    }
}

/// Scores `est` against `gt` over ground-truth-valid pixels; estimates missing
/// at a scored pixel count as outliers. Splits follow the ground-truth mask.
pub fn outlier_metrics(est: &SceneFlowField, gt: &GroundTruthFrame) -> Result<OutlierTable> {
    let (w, h) = (gt.disp0.width, gt.disp0.height);
    if est.width() != w || est.height() != h {
        return Err(Error::DimensionMismatch(format!(
            "estimate {}x{} vs ground truth {w}x{h}",
            est.width(),
            est.height()
        )));
    }
    let mut table = OutlierTable::default();
    for y in 0..h {
        for x in 0..w {
            let mut c = OutlierCounts::default();
            let d1 = gt.disp0.get(x, y).map(|g| match est.disp0.get(x, y) {
                Some(e) => is_outlier((e - g).abs(), g.abs()),
                None => true,
            });
            let d2 = gt.disp1.get(x, y).map(|g| match est.disp_warp.get(x, y) {
                Some(e) => is_outlier((e - g).abs(), g.abs()),
                None => true,
            });
            let fl = gt.flow.get(x, y).map(|(gu, gv)| match est.rigid_flow.get(x, y) {
                Some((eu, ev)) => is_outlier((eu - gu).hypot(ev - gv), gu.hypot(gv)),
                None => true,
            });
            for (slot, v) in [(&mut c.d1, d1), (&mut c.d2, d2), (&mut c.fl, fl)] {
                if let Some(bad) = v {
                    *slot = (bad as usize, 1);
                }
            }
            if let (Some(a), Some(b), Some(f)) = (d1, d2, fl) {
                c.sf = ((a || b || f) as usize, 1);
            }
            if gt.seg.get(x, y) == 0 {
                table.bg.add(&c);
            } else {
                table.fg.add(&c);
            }
        }
    }
    table.all = table.bg;
    table.all.add(&table.fg);
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MotionError {
    pub instance_id: u32,
    pub translation_m: f64,
    pub angle_deg: f64,
}

/// Translation-component and geodesic rotation errors of matching ids;
/// ids present on one side only are returned separately.
pub fn motion_errors(
    est: &BTreeMap<u32, RigidMotion>,
    gt: &BTreeMap<u32, RigidMotion>,
) -> (Vec<MotionError>, Vec<u32>) {
    let mut errors = Vec::new();
    let mut unmatched = Vec::new();
    for (id, e) in est {
        match gt.get(id) {
            Some(g) => errors.push(MotionError {
                instance_id: *id,
                translation_m: (e.translation() - g.translation()).norm(),
                angle_deg: e.inverse().compose(g).rotation_angle().to_degrees(),
            }),
            None => unmatched.push(*id),
        }
    }
    unmatched.extend(gt.keys().filter(|id| !est.contains_key(id)));
    unmatched.sort_unstable();
    (errors, unmatched)
}

/// Camera poses (camera to frame-0 camera) from consecutive background
/// motions; `poses[0]` is the identity.
pub fn ego_trajectory(background: &[RigidMotion]) -> Vec<RigidMotion> {
    let mut poses = Vec::with_capacity(background.len() + 1);
    let mut pose = RigidMotion::identity();
    poses.push(pose);
    for m in background {
        pose = pose.compose(&m.inverse());
        poses.push(pose);
    }
    poses
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OdometryDrift {
    /// Ground-truth distance traveled.
    pub path_length_m: f64,
    pub end_translation_m: f64,
    pub end_rotation_deg: f64,
    pub translation_per_m: f64,
    pub rotation_deg_per_m: f64,
}

/// End-point error of the estimated ego chain against the ground-truth chain,
/// normalized by the ground-truth path length.
pub fn odometry_drift(est_background: &[RigidMotion], gt_background: &[RigidMotion]) -> Result<OdometryDrift> {
    if est_background.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    if est_background.len() != gt_background.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} estimated vs {} ground-truth background motions",
            est_background.len(),
            gt_background.len()
        )));
    }
    let est = ego_trajectory(est_background);
    let gt = ego_trajectory(gt_background);
    let path_length_m: f64 = gt.windows(2).map(|p| (p[1].translation() - p[0].translation()).norm()).sum();
    if !(path_length_m > 0.0) {
        return Err(Error::DegenerateGeometry("ground-truth path has zero length".into()));
    }
    let (e, g) = (est.last().unwrap(), gt.last().unwrap());
    let end_translation_m = (e.translation() - g.translation()).norm();
    let end_rotation_deg = g.inverse().compose(e).rotation_angle().to_degrees();
    Ok(OdometryDrift {
        path_length_m,
        end_translation_m,
        end_rotation_deg,
        translation_per_m: end_translation_m / path_length_m,
        rotation_deg_per_m: end_rotation_deg / path_length_m,
    })
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub outliers: OutlierTable,
    pub motions: Vec<MotionError>,
    pub unmatched: Vec<u32>,
    pub odometry: Option<OdometryDrift>,
}

impl MetricsReport {
    /// Flat `key=value` lines.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (split, c) in [("bg", &self.outliers.bg), ("fg", &self.outliers.fg), ("all", &self.outliers.all)] {
            let p = c.percentages();
            for (name, v, n) in [("d1", p[0], c.d1), ("d2", p[1], c.d2), ("fl", p[2], c.fl), ("sf", p[3], c.sf)] {
                let _ = writeln!(s, "{name}_{split}={v:.4}");
                let _ = writeln!(s, "{name}_{split}_pixels={}", n.1);
            }
        }
        for m in &self.motions {
            let _ = writeln!(s, "instance_{}_translation_m={:.6e}", m.instance_id, m.translation_m);
            let _ = writeln!(s, "instance_{}_angle_deg={:.6e}", m.instance_id, m.angle_deg);
        }
        if !self.unmatched.is_empty() {
            let ids: Vec<String> = self.unmatched.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(s, "unmatched_instances={}", ids.join(","));
        }
        if let Some(o) = &self.odometry {
            let _ = writeln!(s, "odometry_path_m={:.6}", o.path_length_m);
            let _ = writeln!(s, "odometry_translation_per_m={:.6e}", o.translation_per_m);
            let _ = writeln!(s, "odometry_rotation_deg_per_m={:.6e}", o.rotation_deg_per_m);
        }
        s
    }

    /// One row per split with D1, D2, Fl and SF outlier percentages.
    pub fn to_table(&self) -> String {
        let mut s = String::from("split\tD1\tD2\tFl\tSF\n");
        for (split, c) in [("bg", &self.outliers.bg), ("fg", &self.outliers.fg), ("all", &self.outliers.all)] {
            let p = c.percentages();
            let _ = writeln!(s, "{split}\t{:.2}\t{:.2}\t{:.2}\t{:.2}", p[0], p[1], p[2], p[3]);
        }
        s
    }
}

/// Writes `disp_0/`, `disp_1/` (warped disparity), `flow/`, `instance/` and
/// `motions/<id>.txt` under `root`, mirroring the ground-truth layout.
pub fn write_scene_flow(field: &SceneFlowField, root: impl AsRef<Path>, id: &str) -> Result<()> {
    let root = root.as_ref();
    let paths = FramePaths::new(root, id);
    write_disparity_png(&field.disp0, &paths.disp0)?;
    write_disparity_png(&field.disp_warp, &paths.disp1)?;
    write_flow_png(&field.rigid_flow, &paths.flow)?;
    write_instance_png(&field.seg, &paths.instance)?;
    let motions: Vec<(u32, Twist)> = field.motions.iter().map(|(k, v)| (*k, *v)).collect();
    write_motions(&motions, motions_path(root, id))
}

pub fn motions_path(root: impl AsRef<Path>, id: &str) -> std::path::PathBuf {
    root.as_ref().join("motions").join(format!("{id}.txt"))
}

pub fn read_scene_flow(root: impl AsRef<Path>, id: &str) -> Result<SceneFlowField> {
    let root = root.as_ref();
    let paths = FramePaths::new(root, id);
    let field = SceneFlowField {
        disp0: read_disparity_png(&paths.disp0)?,
        disp_warp: read_disparity_png(&paths.disp1)?,
        rigid_flow: read_flow_png(&paths.flow)?,
        seg: read_instance_png(&paths.instance)?.0,
        motions: read_motions(motions_path(root, id))?.into_iter().collect(),
    };
    let (w, h) = (field.width(), field.height());
    let dims = [
        (field.disp_warp.width, field.disp_warp.height),
        (field.rigid_flow.width, field.rigid_flow.height),
        (field.seg.width, field.seg.height),
    ];
    if dims.iter().any(|d| *d != (w, h)) {
        return Err(Error::format(&paths.disp0, "estimate maps differ in size"));
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Vec3;
    use crate::synth;
    use std::f64::consts::FRAC_PI_2;

    fn rig() -> CameraRig {
        CameraRig::new(200.0, 200.0, 80.0, 30.0, 0.54, 160, 60).unwrap()
    }

    fn plane(z: f64) -> (ScalarField, InstanceMask) {
        let r = rig();
        let d = r.focal_baseline() / z;
        (
            ScalarField::from_values(r.width, r.height, vec![d; r.width * r.height]).unwrap(),
            InstanceMask::new(r.width, r.height, vec![0; r.width * r.height]).unwrap(),
        )
    }

    #[test]
    fn identity_motions() {
        let (d, seg) = plane(10.0);
        let m = BTreeMap::from([(0, RigidMotion::identity())]);
        let f = compose_scene_flow(&rig(), &d, &seg, &m).unwrap();
        for i in 0..d.values.len() {
            assert!((f.disp_warp.values[i] - d.values[i]).abs() < 1e-12);
            assert!(f.rigid_flow.u[i].abs() < 1e-12 && f.rigid_flow.v[i].abs() < 1e-12);
        }
    }

    #[test]
    fn approaching_plane() {
        let (d, seg) = plane(10.0);
        let m = BTreeMap::from([(0, RigidMotion::from_translation(Vec3::new(0.0, 0.0, -2.0)))]);
        let f = compose_scene_flow(&rig(), &d, &seg, &m).unwrap();
        let expect = rig().focal_baseline() / 8.0;
        assert!(f.disp_warp.values.iter().all(|v| (v - expect).abs() < 1e-12));
    }

    #[test]
    fn missing_motion() {
        let (d, mut seg) = plane(10.0);
        seg.labels[3] = 4;
        let m = BTreeMap::from([(0, RigidMotion::identity())]);
        assert!(matches!(compose_scene_flow(&rig(), &d, &seg, &m), Err(Error::MissingMotion(4))));
    }

    #[test]
    fn ground_truth_motions_reproduce_rendered_maps() {
        let r = synth::render(&synth::street_scene(rig(), 3), 0).unwrap();
        let f = compose_scene_flow(&r.frame.rig, &r.gt.disp0, &r.gt.seg, &r.motion_map()).unwrap();
        let mut checked = 0;
        for i in 0..f.disp0.values.len() {
            if r.gt.disp1.valid[i] {
                assert!((f.disp_warp.values[i] - r.gt.disp1.values[i]).abs() < 1e-9);
                checked += 1;
            }
            if r.gt.flow.valid[i] {
                assert!((f.rigid_flow.u[i] - r.gt.flow.u[i]).abs() < 1e-9);
                assert!((f.rigid_flow.v[i] - r.gt.flow.v[i]).abs() < 1e-9);
            }
        }
        assert!(checked > f.disp0.values.len() / 2);
        let table = outlier_metrics(&f, &r.gt).unwrap();
        assert_eq!(table.all.percentages(), [0.0; 4]);
    }

    #[test]
    fn outlier_rule() {
        assert!(is_outlier(4.0, 10.0));
        assert!(!is_outlier(2.0, 10.0));
        assert!(!is_outlier(2.0, 1000.0));
        assert!(!is_outlier(4.0, 100.0));
    }

    #[test]
    fn splits_add_up() {
        let r = synth::render(&synth::street_scene(rig(), 2), 0).unwrap();
        let mut f = compose_scene_flow(&r.frame.rig, &r.gt.disp0, &r.gt.seg, &r.motion_map()).unwrap();
        for (k, u) in f.rigid_flow.u.iter_mut().enumerate() {
            if k % 7 == 0 {
                *u += 10.0;
            }
        }
        let t = outlier_metrics(&f, &r.gt).unwrap();
        for (a, b, c) in [
            (t.all.fl, t.bg.fl, t.fg.fl),
            (t.all.d1, t.bg.d1, t.fg.d1),
            (t.all.sf, t.bg.sf, t.fg.sf),
        ] {
            assert_eq!(a.0, b.0 + c.0);
            assert_eq!(a.1, b.1 + c.1);
        }
        assert!(t.all.percentages()[2] > 10.0 && t.all.percentages()[2] < 20.0);
        assert_eq!(t.all.fl.0, t.all.sf.0.max(t.all.fl.0));
        assert!((0.0..=100.0).contains(&t.fg.percentages()[3]));
    }

    #[test]
    fn motion_error_cases() {
        let a = RigidMotion::from_translation(Vec3::new(1.0, 2.0, 3.0));
        let rz = Twist::new(Vec3::zeros(), Vec3::new(0.0, 0.0, FRAC_PI_2)).exp().unwrap();
        let b = RigidMotion::new(*rz.rotation(), *a.translation()).unwrap();
        let est = BTreeMap::from([(0, a), (1, b), (5, a)]);
        let gt = BTreeMap::from([(0, a), (1, a), (2, a)]);
        let (errs, unmatched) = motion_errors(&est, &gt);
        assert_eq!(errs[0].translation_m, 0.0);
        assert!(errs[0].angle_deg.abs() < 1e-9);
        assert!(errs[1].translation_m.abs() < 1e-12);
        assert!((errs[1].angle_deg - 90.0).abs() < 1e-9);
        assert_eq!(unmatched, vec![2, 5]);
    }

    #[test]
    fn ego_from_background() {
        let bg = RigidMotion::from_translation(Vec3::new(0.0, 0.0, -1.0));
        let poses = ego_trajectory(&[bg]);
        assert!((poses[1].translation() - Vec3::new(0.0, 0.0, 1.0)).norm() < 1e-15);
        let d = odometry_drift(&[bg, bg], &[bg, bg]).unwrap();
        assert_eq!(d.translation_per_m, 0.0);
        assert_eq!(d.path_length_m, 2.0);
        assert!(odometry_drift(&[], &[]).is_err());
        let off = RigidMotion::from_translation(Vec3::new(0.0, 0.01, -1.0));
        let d = odometry_drift(&[off, bg], &[bg, bg]).unwrap();
        assert!((d.translation_per_m - 0.005).abs() < 1e-12);
    }

    #[test]
    fn estimate_round_trip() {
        let r = synth::render(&synth::street_scene(rig(), 2), 0).unwrap();
        let f = compose_scene_flow(&r.frame.rig, &r.gt.disp0, &r.gt.seg, &r.motion_map()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_scene_flow(&f, dir.path(), "000000").unwrap();
        let back = read_scene_flow(dir.path(), "000000").unwrap();
        assert_eq!(back.seg, f.seg);
        assert_eq!(back.motions, f.motions);
        let t = outlier_metrics(&back, &r.gt).unwrap();
        assert_eq!(t.all.percentages(), [0.0; 4]);
        let report = MetricsReport {
            outliers: t,
            ..Default::default()
        };
        assert!(report.to_key_values().contains("sf_all=0.0000"));
        assert!(report.to_table().starts_with("split\tD1\tD2\tFl\tSF\nbg\t0.00"));
    }
}
