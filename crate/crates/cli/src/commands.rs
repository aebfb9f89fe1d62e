use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;
use rigidflow::config::RunConfig;
use rigidflow::curate::{self, ScaleFlag};
use rigidflow::evaluate::{self, MetricsReport, OutlierTable};
use rigidflow::frameio::{self, FramePaths};
use rigidflow::solver::{self, SolveReport};
use rigidflow::{synth, Error, Result, RigidMotion};

use crate::scene::SceneFile;

/// Frame ids named by `--frames`, or every `instance/<id>.png` under `root`.
pub fn frame_ids(root: &Path, frames: Option<&str>) -> Result<Vec<String>> {
    if let Some(list) = frames {
        let ids: Vec<String> = list
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(String::from)
            .collect();
        if ids.is_empty() {
            return Err(Error::Config("--frames is empty".into()));
        }
        return Ok(ids);
    }
    let dir = root.join("instance");
    let entries = std::fs::read_dir(&dir).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(dir.clone()),
        _ => Error::Io {
            path: dir.clone(),
            source: e,
        },
    })?;
    let mut ids = Vec::new();
    for entry in entries {
        let path = entry
            .map_err(|e| Error::Io {
                path: dir.clone(),
                source: e,
            })?
            .path();
        if path.extension().is_some_and(|x| x == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                ids.push(stem.to_string());
            }
        }
    }
    ids.sort();
    if ids.is_empty() {
        return Err(Error::MissingFile(dir.join("*.png")));
    }
    Ok(ids)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// A command failure: message plus process exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: e.exit_code(),
            message: e.to_string(),
        }
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;

/// Runs `work` on every frame in parallel. Without `keep_going` no frame
/// starts after a failure and the first failure in frame order is returned.
fn for_each_frame<T, F>(ids: &[String], keep_going: bool, work: F) -> Outcome<Vec<Option<T>>>
where
    T: Send,
    F: Fn(&str) -> Result<T> + Sync,
{
    let stop = AtomicBool::new(false);
    let results: Vec<Option<Result<T>>> = ids
        .par_iter()
        .map(|id| {
            if stop.load(Ordering::SeqCst) {
                return None;
            }
            let r = work(id);
            if let Err(e) = &r {
                log::error!("frame {id}: {e}");
                if !keep_going {
                    stop.store(true, Ordering::SeqCst);
                }
            }
            Some(r)
        })
        .collect();
    let mut out = Vec::with_capacity(ids.len());
    let mut first = None;
    for (id, r) in ids.iter().zip(results) {
        match r {
            Some(Ok(v)) => out.push(Some(v)),
            Some(Err(e)) => {
                out.push(None);
                first.get_or_insert(Failure {
                    code: e.exit_code(),
                    message: format!("frame {id}: {e}"),
                });
            }
            None => out.push(None),
        }
    }
    match first {
        Some(f) if !keep_going => Err(f),
        Some(_) => {
            log::warn!("some frames failed; continuing because of --keep-going");
            Ok(out)
        }
        None => Ok(out),
    }
}

pub fn report_text(reports: &[SolveReport]) -> String {
    let mut s = String::from("# id termination steps pixels inliers initial_energy final_energy vx vy vz wx wy wz\n");
    for r in reports {
        let twist: Vec<String> = r.twist.to_array().iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(
            s,
            "{} {} {} {} {} {:?} {:?} {}",
            r.instance_id,
            r.termination,
            r.steps,
            r.pixels,
            r.inliers,
            r.energy_trace[0],
            r.final_energy(),
            twist.join(" ")
        );
    }
    for r in reports {
        if let Some(reason) = &r.fallback_reason {
            let _ = writeln!(s, "# instance {} fallback: {reason}", r.instance_id);
        }
    }
    s
}

pub fn reports_path(root: &Path, id: &str) -> PathBuf {
    root.join("reports").join(format!("{id}.txt"))
}

pub fn solve(cfg: &RunConfig, data: &Path, out: &Path, frames: Option<&str>) -> Outcome<()> {
    let ids = frame_ids(data, frames)?;
    for_each_frame(&ids, cfg.keep_going, |id| {
        let frame = frameio::load_frameset_with_calib(data, id)?;
        let reports = solver::solve_frame(&frame, &cfg.weights, &cfg.pipeline)?;
        let motions = solver::motion_map(&reports);
        let field = evaluate::compose_scene_flow(&frame.rig, &frame.disp0, &frame.seg, &motions)?;
        evaluate::write_scene_flow(&field, out, id)?;
        frameio::write_calib(&frame.rig, FramePaths::new(out, id).calib)?;
        write_text(&reports_path(out, id), &report_text(&reports))?;
        let fallbacks = reports.iter().filter(|r| r.is_fallback()).count();
        log::info!("frame {id}: {} instances, {fallbacks} fallbacks", reports.len());
        Ok(())
    })?;
    Ok(())
}

fn read_motion_map(path: &Path) -> Result<BTreeMap<u32, RigidMotion>> {
    frameio::read_motions(path)?
        .into_iter()
        .map(|(id, t)| Ok((id, t.exp()?)))
        .collect()
}

struct FrameEval {
    outliers: OutlierTable,
    motions: Vec<evaluate::MotionError>,
    unmatched: Vec<u32>,
    background: Option<(RigidMotion, RigidMotion)>,
}

pub fn eval(cfg: &RunConfig, est: &Path, gt: &Path, out: &Path, frames: Option<&str>) -> Outcome<String> {
    let ids = frame_ids(est, frames)?;
    let per_frame = for_each_frame(&ids, cfg.keep_going, |id| {
        let field = evaluate::read_scene_flow(est, id)?;
        let truth = frameio::load_ground_truth(gt, id)?;
        let outliers = evaluate::outlier_metrics(&field, &truth)?;
        let gt_motions = evaluate::motions_path(gt, id);
        let (motions, unmatched, background) = if gt_motions.exists() {
            let e = read_motion_map(&evaluate::motions_path(est, id))?;
            let g = read_motion_map(&gt_motions)?;
            let (m, u) = evaluate::motion_errors(&e, &g);
            let bg = e.get(&0).copied().zip(g.get(&0).copied());
            (m, u, bg)
        } else {
            (Vec::new(), Vec::new(), None)
        };
        Ok(FrameEval {
            outliers,
            motions,
            unmatched,
            background,
        })
    })?;

    let mut report = MetricsReport::default();
    let mut motion_lines = String::new();
    let mut chain = Vec::new();
    for (id, fe) in ids.iter().zip(&per_frame) {
        let Some(fe) = fe else { continue };
        report.outliers.merge(&fe.outliers);
        for m in &fe.motions {
            let _ = writeln!(
                motion_lines,
                "frame_{id}_instance_{}_translation_m={:.6e}\nframe_{id}_instance_{}_angle_deg={:.6e}",
                m.instance_id, m.translation_m, m.instance_id, m.angle_deg
            );
        }
        if !fe.unmatched.is_empty() {
            let u: Vec<String> = fe.unmatched.iter().map(|i| i.to_string()).collect();
            let _ = writeln!(motion_lines, "frame_{id}_unmatched_instances={}", u.join(","));
        }
        chain.push(fe.background);
    }
    if chain.len() > 1 && chain.iter().all(Option::is_some) {
        let (e, g): (Vec<RigidMotion>, Vec<RigidMotion>) = chain.into_iter().flatten().unzip();
        match evaluate::odometry_drift(&e, &g) {
            Ok(d) => report.odometry = Some(d),
            Err(err) => log::info!("odometry skipped: {err}"),
        }
    }
    let kv = format!("frames={}\n{}{}", ids.len(), report.to_key_values(), motion_lines);
    create_dir(out)?;
    write_text(&out.join("metrics.txt"), &kv)?;
    let table = report.to_table();
    write_text(&out.join("table.tsv"), &table)?;
    Ok(format!("{table}\n{kv}"))
}

pub fn curate(cfg: &RunConfig, gt: &Path, out: &Path, frames: Option<&str>) -> Outcome<String> {
    let ids = frame_ids(gt, frames)?;
    let results = for_each_frame(&ids, cfg.keep_going, |id| {
        let truth = frameio::load_ground_truth(gt, id)?;
        let c = curate::curate(&truth, &cfg.curation)?;
        c.write(out, id)?;
        Ok(c)
    })?;
    let mut s = String::from("# frame moves degenerate scaled\n");
    for (id, c) in ids.iter().zip(&results) {
        let Some(c) = c else { continue };
        let degenerate = c.instances.iter().filter(|i| i.is_degenerate()).count();
        let scaled = c.instances.iter().filter(|i| i.scale.flag == ScaleFlag::Scaled).count();
        let _ = writeln!(s, "{id} {} {degenerate} {scaled}", c.moves.len());
    }
    write_text(&out.join("curation.txt"), &s)?;
    Ok(s)
}

pub fn synth(cfg: &RunConfig, scene: &SceneFile, out: &Path, frames: Option<&str>) -> Outcome<()> {
    let ids: Vec<String> = match frames {
        Some(_) => frame_ids(out, frames)?,
        None => (0..scene.frames).map(|k| format!("{k:06}")).collect(),
    };
    let gt_root = out.join("gt");
    for_each_frame(&ids, cfg.keep_going, |id| {
        let k = ids.iter().position(|x| x == id).expect("listed") as u64;
        let mut spec = scene.spec.clone();
        spec.texture_seed = spec.texture_seed.wrapping_add(k);
        let r = synth::render(&spec, cfg.seed.wrapping_add(k))?;
        frameio::write_frameset(&r.frame, out, id)?;
        let mut gt = r.gt.clone();
        if scene.rim > 0 {
            let w = gt.rig.width;
            let eligible: Vec<bool> = (0..gt.seg.labels.len())
                .map(|i| curate::lift(&gt, i % w, i / w).is_some())
                .collect();
            let (bad, injected) = synth::mislabel_rims(&gt.seg, scene.rim, &eligible);
            frameio::write_instance_png(&gt.seg, gt_root.join("instance_clean").join(format!("{id}.png")))?;
            let list: String = injected.iter().map(|i| format!("{i}\n")).collect();
            write_text(&gt_root.join("injected").join(format!("{id}.txt")), &list)?;
            gt.seg = bad;
        }
        frameio::write_ground_truth(&gt, &gt_root, id)?;
        frameio::write_motions(&r.twists(), evaluate::motions_path(&gt_root, id))?;
        Ok(())
    })?;
    Ok(())
}
