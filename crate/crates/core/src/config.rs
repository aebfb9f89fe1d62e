//! Run configuration: a flat `key = value` file, overridable by
//! `RIGIDFLOW_<KEY>` environment variables.
//!
//! ```
//! use rigidflow::config::RunConfig;
//!
//! let cfg = RunConfig::parse("# solver\nmax_steps = 20\nbg_rigid = 1\n").unwrap();
//! assert_eq!(cfg.pipeline.solver.max_steps, 20);
//! assert_eq!(cfg.weights.background.rigid, 1.0);
//! ```

use std::path::Path;
use std::str::FromStr;

use crate::curate::CurationConfig;
use crate::energy::{Interpolation, PhotometricMode};
use crate::error::{Error, Result};
use crate::solver::{PipelineConfig, WeightTable};

pub const ENV_PREFIX: &str = "RIGIDFLOW_";

/// Every recognized key, in file order.
pub const KEYS: &[&str] = &[
    "seed",
    "jobs",
    "keep_going",
    "alpha",
    "epsilon",
    "weight_cap",
    "photometric",
    "interpolation",
    "flow_uses_alpha",
    "max_background_rows",
    "bg_photo",
    "bg_rigid",
    "bg_flow",
    "fg_photo",
    "fg_rigid",
    "fg_flow",
    "occlusion_threshold",
    "ransac_runs",
    "ransac_iterations",
    "inlier_threshold",
    "max_steps",
    "plateau_rel_tol",
    "plateau_patience",
    "damping_init",
    "damping_factor",
    "damping_max",
    "step_twist_cap",
    "boundary_band_px",
    "reassign_margin",
    "scale_tol",
    "refit_rounds",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every core.
    pub jobs: usize,
    pub keep_going: bool,
    pub pipeline: PipelineConfig,
    pub weights: WeightTable,
    pub curation: CurationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: 0,
            keep_going: false,
            pipeline: PipelineConfig::new(),
            weights: WeightTable::default(),
            curation: CurationConfig::default(),
        }
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got {value:?}"))),
    }
}

impl RunConfig {
    /// Defaults overridden by the lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Defaults overridden by a config file. Not validated, so later layers
    /// can still repair a value; call [`RunConfig::validate`] once done.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), strip(e))))?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let key = key.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {key}", n + 1)));
            }
            self.set(key, value.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", n + 1, strip(e))))?;
        }
        Ok(())
    }

    /// Applies `RIGIDFLOW_<KEY>` variables; other variables are ignored.
    pub fn apply_env<I, K, V>(&mut self, vars: I) -> Result<()>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut vars: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| {
                let key = k.as_ref().strip_prefix(ENV_PREFIX)?.to_ascii_lowercase();
                Some((key, v.as_ref().trim().to_string()))
            })
            .collect();
        vars.sort();
        for (key, value) in vars {
            self.set(&key, &value).map_err(|e| {
                Error::Config(format!("{ENV_PREFIX}{}: {}", key.to_ascii_uppercase(), strip(e)))
            })?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let p = &mut self.pipeline;
        let w = &mut self.weights;
        let c = &mut self.curation;
        match key {
            "seed" => self.seed = num(key, value)?,
            "jobs" => self.jobs = num(key, value)?,
            "keep_going" => self.keep_going = boolean(key, value)?,
            "alpha" => p.energy.robust.alpha = num(key, value)?,
            "epsilon" => p.energy.robust.epsilon = num(key, value)?,
            "weight_cap" => p.energy.robust.weight_cap = num(key, value)?,
            "photometric" => {
                p.energy.photometric = match value {
                    "rgb" => PhotometricMode::Rgb,
                    "gray" => PhotometricMode::Gray,
                    _ => return Err(Error::Config(format!("{key}: expected rgb or gray, got {value:?}"))),
                }
            }
            "interpolation" => {
                p.energy.interpolation = match value {
                    "bilinear" => Interpolation::Bilinear,
                    "bicubic" => Interpolation::Bicubic,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key}: expected bilinear or bicubic, got {value:?}"
                        )))
                    }
                }
            }
            "flow_uses_alpha" => p.energy.flow_uses_alpha = boolean(key, value)?,
            "max_background_rows" => p.energy.max_background_rows = num(key, value)?,
            "bg_photo" => w.background.photo = num(key, value)?,
            "bg_rigid" => w.background.rigid = num(key, value)?,
            "bg_flow" => w.background.flow = num(key, value)?,
            "fg_photo" => w.foreground.photo = num(key, value)?,
            "fg_rigid" => w.foreground.rigid = num(key, value)?,
            "fg_flow" => w.foreground.flow = num(key, value)?,
            "occlusion_threshold" => p.occlusion_threshold = num(key, value)?,
            "ransac_runs" => p.ransac.runs = num(key, value)?,
            "ransac_iterations" => p.ransac.iterations_per_run = num(key, value)?,
            "inlier_threshold" => p.ransac.inlier_threshold = num(key, value)?,
            "max_steps" => p.solver.max_steps = num(key, value)?,
            "plateau_rel_tol" => p.solver.plateau_rel_tol = num(key, value)?,
            "plateau_patience" => p.solver.plateau_patience = num(key, value)?,
            "damping_init" => p.solver.damping_init = num(key, value)?,
            "damping_factor" => p.solver.damping_factor = num(key, value)?,
            "damping_max" => p.solver.damping_max = num(key, value)?,
            "step_twist_cap" => p.solver.step_twist_cap = num(key, value)?,
            "boundary_band_px" => c.boundary_band_px = num(key, value)?,
            "reassign_margin" => c.reassign_margin = num(key, value)?,
            "scale_tol" => c.scale_tol = num(key, value)?,
            "refit_rounds" => c.refit_rounds = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        if key == "seed" {
            p.ransac.seed = self.seed;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            self.pipeline.validate(),
            self.weights.background.validate(),
            self.weights.foreground.validate(),
            self.curation.validate(),
        ];
        for r in checks {
            r.map_err(|e| Error::Config(strip(e)))?;
        }
        Ok(())
    }

    /// The canonical file form; parsing it yields `self` again.
    pub fn to_text(&self) -> String {
        let p = &self.pipeline;
        let w = &self.weights;
        let c = &self.curation;
        let values: Vec<String> = vec![
            self.seed.to_string(),
            self.jobs.to_string(),
            self.keep_going.to_string(),
            format!("{:?}", p.energy.robust.alpha),
            format!("{:?}", p.energy.robust.epsilon),
            format!("{:?}", p.energy.robust.weight_cap),
            match p.energy.photometric {
                PhotometricMode::Rgb => "rgb".into(),
                PhotometricMode::Gray => "gray".into(),
            },
            match p.energy.interpolation {
                Interpolation::Bilinear => "bilinear".into(),
                Interpolation::Bicubic => "bicubic".into(),
            },
            p.energy.flow_uses_alpha.to_string(),
            p.energy.max_background_rows.to_string(),
            format!("{:?}", w.background.photo),
            format!("{:?}", w.background.rigid),
            format!("{:?}", w.background.flow),
            format!("{:?}", w.foreground.photo),
            format!("{:?}", w.foreground.rigid),
            format!("{:?}", w.foreground.flow),
            format!("{:?}", p.occlusion_threshold),
            p.ransac.runs.to_string(),
            p.ransac.iterations_per_run.to_string(),
            format!("{:?}", p.ransac.inlier_threshold),
            p.solver.max_steps.to_string(),
            format!("{:?}", p.solver.plateau_rel_tol),
            p.solver.plateau_patience.to_string(),
            format!("{:?}", p.solver.damping_init),
            format!("{:?}", p.solver.damping_factor),
            format!("{:?}", p.solver.damping_max),
            format!("{:?}", p.solver.step_twist_cap),
            c.boundary_band_px.to_string(),
            format!("{:?}", c.reassign_margin),
            format!("{:?}", c.scale_tol),
            c.refit_rounds.to_string(),
        ];
        KEYS.iter()
            .zip(values)
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }
}

fn strip(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
        assert_eq!(cfg.to_text().lines().count(), KEYS.len());
    }

    #[test]
    fn every_key_is_settable() {
        let mut cfg = RunConfig::default();
        cfg.seed = 9;
        cfg.pipeline.ransac.seed = 9;
        cfg.jobs = 3;
        cfg.keep_going = true;
        cfg.pipeline.energy.photometric = PhotometricMode::Gray;
        cfg.pipeline.energy.interpolation = Interpolation::Bilinear;
        cfg.pipeline.energy.flow_uses_alpha = false;
        cfg.pipeline.solver.max_steps = 7;
        cfg.weights.background.flow = 0.5;
        cfg.curation.scale_tol = 0.1;
        assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }

    #[test]
    fn comments_and_blank_lines() {
        let cfg = RunConfig::parse("\n# header\n  seed = 42   # trailing\n\nalpha=0.5\n").unwrap();
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.pipeline.ransac.seed, 42);
        assert_eq!(cfg.pipeline.energy.robust.alpha, 0.5);
    }

    #[test]
    fn errors_name_the_line() {
        let e = RunConfig::parse("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(e.to_string().contains("line 2") && e.to_string().contains("bogus"), "{e}");
        assert_eq!(e.exit_code(), 1);
        assert!(RunConfig::parse("max_steps = many").is_err());
        assert!(RunConfig::parse("seed 1").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("max_steps = 0").is_err());
        assert!(RunConfig::parse("scale_tol = 1.5").is_err());
        assert!(RunConfig::parse("bg_photo = 0\nbg_rigid = 0\nbg_flow = 0").is_err());
    }

    #[test]
    fn env_overrides() {
        let mut cfg = RunConfig::parse("max_steps = 20").unwrap();
        cfg.apply_env([
            ("RIGIDFLOW_MAX_STEPS", "30"),
            ("RIGIDFLOW_KEEP_GOING", "yes"),
            ("HOME", "/root"),
        ])
        .unwrap();
        assert_eq!(cfg.pipeline.solver.max_steps, 30);
        assert!(cfg.keep_going);
        let e = cfg.apply_env([("RIGIDFLOW_NOPE", "1")]).unwrap_err();
        assert!(e.to_string().contains("RIGIDFLOW_NOPE"));
    }

    #[test]
    fn missing_file() {
        let e = RunConfig::from_file("/nonexistent/run.cfg").unwrap_err();
        assert!(e.to_string().contains("/nonexistent/run.cfg"));
        assert_eq!(e.exit_code(), 1);
    }
}
