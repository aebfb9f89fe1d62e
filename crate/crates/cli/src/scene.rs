//! Scene files for `rigidflow synth`: flat `key = value` lines, `#` comments.

use std::path::Path;

use rigidflow::synth::{self, SceneSpec};
use rigidflow::{CameraRig, Error, Result, Twist};

/// A parsed scene file.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneFile {
    pub spec: SceneSpec,
    /// Number of frames rendered from the spec.
    pub frames: usize,
    /// Width of the boundary rims mislabeled in the written ground-truth mask.
    pub rim: usize,
}

impl Default for SceneFile {
    fn default() -> Self {
        let rig = CameraRig::new(200.0, 200.0, 160.0, 48.0, 0.54, 320, 96).expect("valid rig");
        SceneFile {
            spec: synth::street_scene(rig, 3),
            frames: 1,
            rim: 0,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn floats(key: &str, value: &str, n: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = value.split_whitespace().map(|s| num(key, s)).collect::<Result<_>>()?;
    if v.len() != n {
        return Err(Error::Config(format!("{key}: expected {n} numbers, got {}", v.len())));
    }
    Ok(v)
}

impl SceneFile {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Starts from the default street scene; rig keys rebuild it, so they
    /// must come before `objects`, `ego` and object edits.
    pub fn parse(text: &str) -> Result<Self> {
        let mut scene = SceneFile::default();
        let mut rig = scene.spec.rig;
        let mut objects = scene.spec.objects.len();
        let mut rig_touched = false;
        let mut rebuilt = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let at = |e: Error| Error::Config(format!("line {}: {e}", n + 1));
            let is_rig = matches!(key, "width" | "height" | "fx" | "fy" | "cx" | "cy" | "baseline");
            if is_rig && rebuilt {
                return Err(at(Error::Config(format!("{key} must precede scene keys"))));
            }
            if !is_rig && !rebuilt {
                if rig_touched {
                    rig.validate().map_err(at)?;
                    scene.spec = rebuild(&scene.spec, rig, objects);
                }
                rebuilt = true;
            }
            match key {
                "width" => rig.width = num(key, value).map_err(at)?,
                "height" => rig.height = num(key, value).map_err(at)?,
                "fx" => rig.fx = num(key, value).map_err(at)?,
                "fy" => rig.fy = num(key, value).map_err(at)?,
                "cx" => rig.cx = num(key, value).map_err(at)?,
                "cy" => rig.cy = num(key, value).map_err(at)?,
                "baseline" => rig.baseline = num(key, value).map_err(at)?,
                "objects" => {
                    objects = num(key, value).map_err(at)?;
                    if objects > 3 {
                        return Err(at(Error::Config("objects: at most 3".into())));
                    }
                    scene.spec = rebuild(&scene.spec, rig, objects);
                }
                "ego" => scene.spec.ego_motion = twist(&floats(key, value, 6).map_err(at)?),
                "motion" => {
                    let v = floats(key, value, 7).map_err(at)?;
                    object(&mut scene.spec, v[0], key).map_err(at)?.motion = twist(&v[1..]);
                }
                "scale" => {
                    let v = floats(key, value, 2).map_err(at)?;
                    object(&mut scene.spec, v[0], key).map_err(at)?.scale_change = v[1];
                }
                "noise_disparity" => scene.spec.noise.disparity = num(key, value).map_err(at)?,
                "noise_flow" => scene.spec.noise.flow = num(key, value).map_err(at)?,
                "noise_image" => scene.spec.noise.image = num(key, value).map_err(at)?,
                "outlier_fraction" => scene.spec.outlier_fraction = num(key, value).map_err(at)?,
                "outlier_range" => scene.spec.outlier_range = num(key, value).map_err(at)?,
                "mark_occlusions" => {
                    scene.spec.mark_occlusions = match value {
                        "true" | "1" | "yes" => true,
                        "false" | "0" | "no" => false,
                        _ => return Err(at(Error::Config(format!("{key}: expected true or false")))),
                    }
                }
                "texture_seed" => scene.spec.texture_seed = num(key, value).map_err(at)?,
                "channels" => scene.spec.channels = num(key, value).map_err(at)?,
                "frames" => scene.frames = num(key, value).map_err(at)?,
                "rim" => scene.rim = num(key, value).map_err(at)?,
                _ => return Err(at(Error::Config(format!("unknown key {key:?}")))),
            }
            if is_rig {
                rig_touched = true;
            }
        }
        if rig_touched && !rebuilt {
            rig.validate()?;
            scene.spec = rebuild(&scene.spec, rig, objects);
        }
        if scene.frames == 0 {
            return Err(Error::Config("frames must be >= 1".into()));
        }
        scene.spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(scene)
    }
}

fn rebuild(old: &SceneSpec, rig: CameraRig, objects: usize) -> SceneSpec {
    let mut spec = synth::street_scene(rig, objects);
    spec.ego_motion = old.ego_motion;
    spec.noise = old.noise;
    spec.outlier_fraction = old.outlier_fraction;
    spec.mark_occlusions = old.mark_occlusions;
    spec.texture_seed = old.texture_seed;
    spec.channels = old.channels;
    if old.rig == rig {
        spec.outlier_range = old.outlier_range;
    }
    spec
}

fn twist(v: &[f64]) -> Twist {
    let mut a = [0.0; 6];
    a.copy_from_slice(v);
    Twist::from_slice(&a)
}

fn object<'a>(spec: &'a mut SceneSpec, id: f64, key: &str) -> Result<&'a mut synth::SceneObject> {
    spec.objects
        .iter_mut()
        .find(|o| o.id as f64 == id)
        .ok_or_else(|| Error::Config(format!("{key}: no object with id {id}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_street_scene() {
        let s = SceneFile::parse("").unwrap();
        assert_eq!(s.spec.objects.len(), 3);
        assert_eq!(s.frames, 1);
    }

    #[test]
    fn keys_apply() {
        let s = SceneFile::parse(
            "width = 160\nheight = 64\ncx = 80\ncy = 32\nobjects = 2 # two cars\n\
             noise_flow = 0.5\nscale = 2 1.07\nframes = 4\nrim = 2\n",
        )
        .unwrap();
        assert_eq!(s.spec.rig.width, 160);
        assert_eq!(s.spec.objects.len(), 2);
        assert_eq!(s.spec.objects[1].scale_change, 1.07);
        assert_eq!(s.spec.noise.flow, 0.5);
        assert_eq!((s.frames, s.rim), (4, 2));
    }

    #[test]
    fn errors_name_the_line() {
        let e = SceneFile::parse("frames = 2\nbogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("line 2"), "{e}");
        assert!(SceneFile::parse("objects = 1\nwidth = 100\n").is_err());
        assert!(SceneFile::parse("scale = 5 1.1\n").is_err());
        assert!(SceneFile::parse("ego = 1 2 3\n").is_err());
    }
}
