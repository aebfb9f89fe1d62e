//! Ray-traced synthetic scenes with exactly known cues and motions.
//!
//! The world is the frame-0 left camera frame. The background is a ground
//! plane and/or a far wall (instance 0) moving with the inverse ego-motion;
//! every object is a textured rectangle or box moving by a twist expressed in
//! its own body frame. Disparity, flow and segmentation are computed in
//! closed form from the geometry, then cue noise and flow outliers are
//! applied on top of the exact render.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frameio::{FlowField, FrameSet, GroundTruthFrame, ImageGrid, InstanceMask, ScalarField};
use crate::geometry::{CameraRig, Pixel, RigidMotion, Twist, Vec3, Z_MIN};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Rectangle in the local xy plane.
    Plane { half_width: f64, half_height: f64 },
    /// Axis-aligned box in local coordinates.
    Box { half_extents: Vec3 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    pub id: u32,
    pub shape: Shape,
    /// Object frame to frame-0 camera.
    pub pose: RigidMotion,
    /// Body-frame motion between the two frames.
    pub motion: Twist,
    /// Uniform scale applied about the object origin in frame 1; 1 is rigid.
    pub scale_change: f64,
}

impl SceneObject {
    pub fn new(id: u32, shape: Shape, pose: RigidMotion, motion: Twist) -> Self {
        SceneObject {
            id,
            shape,
            pose,
            motion,
            scale_change: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseSpec {
    /// Gaussian sigma on both disparity maps, pixels.
    pub disparity: f64,
    /// Gaussian sigma on each flow component, pixels.
    pub flow: f64,
    /// Gaussian sigma on image intensities.
    pub image: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Background {
    /// Height of the camera above a ground plane `y = ground_height`.
    pub ground_height: Option<f64>,
    /// Depth of a fronto-parallel wall.
    pub wall_depth: Option<f64>,
    /// Lateral distance of two facades `x = ±offset`.
    pub facade_offset: Option<f64>,
}

impl Default for Background {
    fn default() -> Self {
        Background {
            ground_height: Some(1.65),
            wall_depth: Some(40.0),
            facade_offset: Some(7.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub rig: CameraRig,
    /// Camera motion from frame 0 to frame 1; the background moves by its inverse.
    pub ego_motion: Twist,
    pub objects: Vec<SceneObject>,
    pub background: Background,
    pub noise: NoiseSpec,
    /// Fraction of valid flow pixels replaced by uniform noise.
    pub outlier_fraction: f64,
    /// Outlier flow components are uniform in `[-outlier_range, outlier_range]`.
    pub outlier_range: f64,
    /// When false, frame-1 occlusion does not invalidate ground truth.
    pub mark_occlusions: bool,
    /// Texture wavelength range in pixels at each surface's nominal depth.
    pub texture_wavelength_px: (f64, f64),
    pub texture_seed: u64,
    pub channels: usize,
}

impl SceneSpec {
    pub fn new(rig: CameraRig) -> Self {
        SceneSpec {
            rig,
            ego_motion: Twist::zero(),
            objects: Vec::new(),
            background: Background::default(),
            noise: NoiseSpec::default(),
            outlier_fraction: 0.0,
            outlier_range: 0.25 * rig.width as f64,
            mark_occlusions: true,
            texture_wavelength_px: (16.0, 40.0),
            texture_seed: 0,
            channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        let mut ids: Vec<u32> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(k, id)| *id != k as u32 + 1) {
            return Err(Error::InvalidArgument(format!(
                "object ids must be unique and run 1..=n, got {ids:?}"
            )));
        }
        let n = &self.noise;
        if ![n.disparity, n.flow, n.image].iter().all(|s| s.is_finite() && *s >= 0.0) {
            return Err(Error::InvalidArgument("noise sigmas must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.outlier_fraction) || !(self.outlier_range >= 0.0) {
            return Err(Error::InvalidArgument("outlier fraction must lie in [0, 1)".into()));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::InvalidArgument("channels must be 1 or 3".into()));
        }
        let (lo, hi) = self.texture_wavelength_px;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidArgument("bad texture wavelength range".into()));
        }
        if !self.ego_motion.is_finite() {
            return Err(Error::InvalidArgument("non-finite ego motion".into()));
        }
        for o in &self.objects {
            if !(o.pose.translation().z > Z_MIN) {
                return Err(Error::BehindCamera {
                    z: o.pose.translation().z,
                });
            }
            if !(o.scale_change > 0.0) || !o.motion.is_finite() {
                return Err(Error::InvalidArgument(format!("object {}: bad motion", o.id)));
            }
            let positive = match o.shape {
                Shape::Plane {
                    half_width,
                    half_height,
                } => half_width > 0.0 && half_height > 0.0,
                Shape::Box { half_extents } => half_extents.iter().all(|h| *h > 0.0),
            };
            if !positive {
                return Err(Error::InvalidArgument(format!("object {}: empty shape", o.id)));
            }
        }
        if self.background.ground_height.is_none()
            && self.background.wall_depth.is_none()
            && self.objects.is_empty()
        {
            return Err(Error::InvalidArgument("scene is empty".into()));
        }
        Ok(())
    }

    /// Frame-0 → frame-1 motion of the background points.
    pub fn background_motion(&self) -> Result<RigidMotion> {
        Ok(self.ego_motion.exp()?.inverse())
    }

    /// Ground-truth camera-frame motion of every instance, background first.
    pub fn instance_motions(&self) -> Result<Vec<(u32, RigidMotion)>> {
        let bg = self.background_motion()?;
        let mut out = vec![(0, bg)];
        for o in &self.objects {
            let world = o.pose.compose(&o.motion.exp()?).compose(&o.pose.inverse());
            out.push((o.id, bg.compose(&world)));
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
struct Texture {
    // Per channel: (kx, ky, phase, amplitude), wave numbers in rad/m.
    waves: Vec<Vec<(f64, f64, f64, f64)>>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, channels: usize, wavelength_m: (f64, f64)) -> Self {
        const WAVES: usize = 4;
        let waves = (0..channels)
            .map(|_| {
                (0..WAVES)
                    .map(|_| {
                        let lambda = rng.random_range(wavelength_m.0..=wavelength_m.1);
                        let dir = rng.random_range(0.0..std::f64::consts::PI);
                        let k = 2.0 * std::f64::consts::PI / lambda;
                        let phase = rng.random_range(0.0..2.0 * std::f64::consts::PI);
                        let amp = rng.random_range(0.06..0.11);
                        (k * dir.cos(), k * dir.sin(), phase, amp)
                    })
                    .collect()
            })
            .collect();
        Texture { waves }
    }

    /// Amplitudes sum below 0.45 so values stay inside (0.05, 0.95).
    fn eval(&self, a: f64, b: f64, out: &mut [f64]) {
        for (c, waves) in self.waves.iter().enumerate() {
            out[c] = 0.5
                + waves
                    .iter()
                    .map(|(kx, ky, ph, amp)| amp * (kx * a + ky * b + ph).sin())
                    .sum::<f64>();
        }
    }
}

#[derive(Clone, Debug)]
struct Surface {
    instance: u32,
    /// Local frame (z = normal) to camera, per time step.
    frame: [RigidMotion; 2],
    /// Rectangle half sizes in frame 0; `None` for an unbounded plane.
    half: Option<(f64, f64)>,
    /// Local-coordinate scale of frame 1 relative to frame 0.
    scale1: f64,
    texture: Texture,
    /// Texture coordinates `(fx a / b, fy h / b)` instead of `(a, b)`; keeps
    /// the ground's image-space wavelength uniform out to the horizon.
    projective: Option<(f64, f64)>,
}

/// Result of casting one ray.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub surface: usize,
    pub instance: u32,
    pub depth: f64,
    /// Material coordinates on the surface (frame-0 units).
    pub material: (f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Time {
    Frame0 = 0,
    Frame1 = 1,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Eye {
    Left,
    Right,
}

/// A spec compiled to ray-traceable surfaces.
#[derive(Clone, Debug)]
pub struct Scene {
    spec: SceneSpec,
    surfaces: Vec<Surface>,
    motions: Vec<(u32, RigidMotion)>,
}

/// Everything a render produces.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub frame: FrameSet,
    pub gt: GroundTruthFrame,
    /// Ground-truth camera-frame motion per instance id, background first.
    pub motions: Vec<(u32, RigidMotion)>,
    /// Pixels whose flow was replaced by an outlier.
    pub outlier_pixels: Vec<usize>,
}

impl Rendered {
    pub fn twists(&self) -> Vec<(u32, Twist)> {
        self.motions.iter().map(|(id, m)| (*id, m.log())).collect()
    }

    pub fn motion_map(&self) -> BTreeMap<u32, RigidMotion> {
        self.motions.iter().copied().collect()
    }
}

fn face_frames(half: &Vec3) -> Vec<(RigidMotion, (f64, f64))> {
    let mut out = Vec::with_capacity(6);
    for axis in 0..3 {
        for sign in [1.0, -1.0] {
            let (i1, i2) = ((axis + 1) % 3, (axis + 2) % 3);
            let mut z = Vec3::zeros();
            z[axis] = sign;
            let mut x = Vec3::zeros();
            x[i1] = 1.0;
            let y = z.cross(&x);
            let r = nalgebra::Matrix3::from_columns(&[x, y, z]);
            let center = z * half[axis];
            out.push((
                RigidMotion::new(r, center).expect("axis frame"),
                (half[i1], half[i2]),
            ));
        }
    }
    out
}

impl Scene {
    pub fn new(spec: &SceneSpec) -> Result<Self> {
        spec.validate()?;
        let rig = &spec.rig;
        let motions = spec.instance_motions()?;
        let bg = motions[0].1;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.texture_seed);
        let (lo, hi) = spec.texture_wavelength_px;
        let texture = |depth: f64, rng: &mut ChaCha8Rng| {
            let m = depth / rig.fx;
            Texture::random(rng, spec.channels, (lo * m, hi * m))
        };
        let mut surfaces = Vec::new();
        if let Some(h) = spec.background.ground_height {
            let r = nalgebra::Matrix3::from_columns(&[
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 0.0, 1.0),
                Vec3::new(0.0, -1.0, 0.0),
            ]);
            let f0 = RigidMotion::new(r, Vec3::new(0.0, h, 0.0))?;
            surfaces.push(Surface {
                instance: 0,
                frame: [f0, bg.compose(&f0)],
                half: None,
                scale1: 1.0,
                texture: texture(rig.fx, &mut rng),
                projective: Some((rig.fx, rig.fy * h)),
            });
        }
        if let Some(x) = spec.background.facade_offset {
            for side in [-1.0, 1.0] {
                let r = nalgebra::Matrix3::from_columns(&[
                    Vec3::new(0.0, -side, 0.0),
                    Vec3::new(0.0, 0.0, 1.0),
                    Vec3::new(-side, 0.0, 0.0),
                ]);
                let f0 = RigidMotion::new(r, Vec3::new(side * x, 0.0, 0.0))?;
                surfaces.push(Surface {
                    instance: 0,
                    frame: [f0, bg.compose(&f0)],
                    half: None,
                    scale1: 1.0,
                    texture: texture(rig.fx, &mut rng),
                    projective: Some((rig.fy, rig.fx * x)),
                });
            }
        }
        if let Some(d) = spec.background.wall_depth {
            let r = nalgebra::Matrix3::from_columns(&[
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, -1.0, 0.0),
                Vec3::new(0.0, 0.0, -1.0),
            ]);
            let f0 = RigidMotion::new(r, Vec3::new(0.0, 0.0, d))?;
            surfaces.push(Surface {
                instance: 0,
                frame: [f0, bg.compose(&f0)],
                half: None,
                scale1: 1.0,
                texture: texture(d, &mut rng),
                projective: None,
            });
        }
        for o in &spec.objects {
            let moved = bg.compose(&o.pose).compose(&o.motion.exp()?);
            let faces = match o.shape {
                Shape::Plane {
                    half_width,
                    half_height,
                } => vec![(RigidMotion::identity(), (half_width, half_height))],
                Shape::Box { half_extents } => face_frames(&half_extents),
            };
            let depth = o.pose.translation().z;
            for (local, half) in faces {
                let f0 = o.pose.compose(&local);
                let scaled = RigidMotion::new(*local.rotation(), local.translation() * o.scale_change)?;
                surfaces.push(Surface {
                    instance: o.id,
                    frame: [f0, moved.compose(&scaled)],
                    half: Some(half),
                    scale1: o.scale_change,
                    texture: texture(depth, &mut rng),
                    projective: None,
                });
            }
        }
        Ok(Scene {
            spec: spec.clone(),
            surfaces,
            motions,
        })
    }

    pub fn spec(&self) -> &SceneSpec {
        &self.spec
    }

    pub fn motions(&self) -> &[(u32, RigidMotion)] {
        &self.motions
    }

    /// Nearest surface along the ray through continuous pixel `p`.
    pub fn cast(&self, time: Time, eye: Eye, p: &Pixel) -> Option<Hit> {
        let rig = &self.spec.rig;
        let origin = match eye {
            Eye::Left => Vec3::zeros(),
            Eye::Right => Vec3::new(rig.baseline, 0.0, 0.0),
        };
        let dir = Vec3::new((p.x - rig.cx) / rig.fx, (p.y - rig.cy) / rig.fy, 1.0);
        let t = time as usize;
        let mut best: Option<Hit> = None;
        for (k, s) in self.surfaces.iter().enumerate() {
            let frame = &s.frame[t];
            let n = frame.rotation().column(2).into_owned();
            let denom = n.dot(&dir);
            if denom.abs() < 1e-12 {
                continue;
            }
            let depth = n.dot(&(frame.translation() - origin)) / denom;
            if !(depth > Z_MIN) || best.is_some_and(|b| b.depth <= depth) {
                continue;
            }
            let x = origin + dir * depth;
            let local = frame.rotation().transpose() * (x - frame.translation());
            let scale = if t == 0 { 1.0 } else { s.scale1 };
            if let Some((hw, hh)) = s.half {
                if local.x.abs() > hw * scale || local.y.abs() > hh * scale {
                    continue;
                }
            }
            best = Some(Hit {
                surface: k,
                instance: s.instance,
                depth,
                material: (local.x / scale, local.y / scale),
            });
        }
        best
    }

    /// Frame-1 position of the material point `hit` refers to.
    pub fn moved_point(&self, hit: &Hit) -> Vec3 {
        let s = &self.surfaces[hit.surface];
        let (a, b) = hit.material;
        s.frame[1].transform_point(&Vec3::new(a * s.scale1, b * s.scale1, 0.0))
    }

    fn shade(&self, hit: &Hit, out: &mut [f64]) {
        let (a, b) = hit.material;
        let s = &self.surfaces[hit.surface];
        match s.projective {
            Some((fa, fb)) => {
                let b = b.max(0.1);
                s.texture.eval(fa * a / b, fb / b, out)
            }
            None => s.texture.eval(a, b, out),
        }
    }

    fn render_view(&self, time: Time, eye: Eye) -> (ImageGrid, Vec<Option<Hit>>) {
        let rig = &self.spec.rig;
        let (w, h, ch) = (rig.width, rig.height, self.spec.channels);
        let hits: Vec<Option<Hit>> = (0..w * h)
            .into_par_iter()
            .map(|i| self.cast(time, eye, &Pixel::new((i % w) as f64, (i / w) as f64)))
            .collect();
        let mut data = vec![0.0; w * h * ch];
        for (i, hit) in hits.iter().enumerate() {
            if let Some(hit) = hit {
                self.shade(hit, &mut data[i * ch..(i + 1) * ch]);
            }
        }
        (
            ImageGrid {
                width: w,
                height: h,
                channels: ch,
                data,
            },
            hits,
        )
    }

    /// Exact ground truth and cues, then noise drawn from `seed`.
    pub fn render(&self, seed: u64) -> Result<Rendered> {
        let rig = self.spec.rig;
        let (w, h) = (rig.width, rig.height);
        let fb = rig.focal_baseline();
        let (left0, hits0) = self.render_view(Time::Frame0, Eye::Left);
        let (left1, hits1) = self.render_view(Time::Frame1, Eye::Left);
        let (right0, _) = self.render_view(Time::Frame0, Eye::Right);
        let (right1, _) = self.render_view(Time::Frame1, Eye::Right);

        let mut seg = vec![0u32; w * h];
        let mut gt_disp0 = ScalarField::invalid(w, h);
        let mut gt_disp1 = ScalarField::invalid(w, h);
        let mut gt_flow = FlowField::invalid(w, h);
        let mut cue_flow = FlowField::invalid(w, h);
        let per_pixel: Vec<Option<(Vec3, Pixel, bool)>> = hits0
            .par_iter()
            .enumerate()
            .map(|(i, hit)| {
                let hit = hit.as_ref()?;
                let p = Pixel::new((i % w) as f64, (i / w) as f64);
                let x1 = self.moved_point(hit);
                let q = rig.project(&x1).ok()?;
                let visible = rig.contains(&q)
                    && (!self.spec.mark_occlusions
                        || self.cast(Time::Frame1, Eye::Left, &q).is_some_and(|h1| {
                            h1.surface == hit.surface
                                && (h1.depth - x1.z).abs() <= 1e-9 * x1.z.max(1.0)
                        }));
                Some((x1, Pixel::new(q.x - p.x, q.y - p.y), visible))
            })
            .collect();
        for (i, hit) in hits0.iter().enumerate() {
            let Some(hit) = hit else { continue };
            seg[i] = hit.instance;
            gt_disp0.values[i] = fb / hit.depth;
            gt_disp0.valid[i] = true;
            if let Some((x1, flow, visible)) = per_pixel[i] {
                cue_flow.u[i] = flow.x;
                cue_flow.v[i] = flow.y;
                cue_flow.valid[i] = true;
                if visible {
                    gt_flow.u[i] = flow.x;
                    gt_flow.v[i] = flow.y;
                    gt_flow.valid[i] = true;
                    gt_disp1.values[i] = fb / x1.z;
                    gt_disp1.valid[i] = true;
                }
            }
        }
        let mut disp1 = ScalarField::invalid(w, h);
        for (i, hit) in hits1.iter().enumerate() {
            if let Some(hit) = hit {
                disp1.values[i] = fb / hit.depth;
                disp1.valid[i] = true;
            }
        }
        let seg = InstanceMask::new(w, h, seg)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = self.spec.noise;
        let mut disp0 = gt_disp0.clone();
        add_disparity_noise(&mut disp0, noise.disparity, &mut rng)?;
        add_disparity_noise(&mut disp1, noise.disparity, &mut rng)?;
        if noise.flow > 0.0 {
            let n = normal(noise.flow)?;
            for i in 0..w * h {
                if cue_flow.valid[i] {
                    cue_flow.u[i] += n.sample(&mut rng);
                    cue_flow.v[i] += n.sample(&mut rng);
                }
            }
        }
        let valid_flow: Vec<usize> = (0..w * h).filter(|i| cue_flow.valid[*i]).collect();
        let n_out = (self.spec.outlier_fraction * valid_flow.len() as f64).round() as usize;
        let mut outlier_pixels: Vec<usize> = sample(&mut rng, valid_flow.len(), n_out)
            .into_iter()
            .map(|k| valid_flow[k])
            .collect();
        outlier_pixels.sort_unstable();
        let range = self.spec.outlier_range;
        for &i in &outlier_pixels {
            cue_flow.u[i] = rng.random_range(-range..=range);
            cue_flow.v[i] = rng.random_range(-range..=range);
        }
        let mut images = [left0, right0, left1, right1];
        if noise.image > 0.0 {
            let n = normal(noise.image)?;
            for img in images.iter_mut() {
                for x in img.data.iter_mut() {
                    *x = (*x + n.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
        }
        let [left0, right0, left1, right1] = images;
        let frame = FrameSet {
            left0,
            right0,
            left1,
            right1,
            disp0,
            disp1,
            flow_left: cue_flow,
            flow_right: None,
            seg: seg.clone(),
            rig,
        };
        frame.validate()?;
        Ok(Rendered {
            frame,
            gt: GroundTruthFrame {
                rig,
                seg,
                disp0: gt_disp0,
                disp1: gt_disp1,
                flow: gt_flow,
            },
            motions: self.motions.clone(),
            outlier_pixels,
        })
    }
}

fn normal(sigma: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn add_disparity_noise(field: &mut ScalarField, sigma: f64, rng: &mut ChaCha8Rng) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let n = normal(sigma)?;
    for (v, ok) in field.values.iter_mut().zip(&field.valid) {
        if *ok {
            // Clamped so noise never flips validity.
            *v = (*v + n.sample(rng)).max(0.01);
        }
    }
    Ok(())
}

/// Renders `spec` in one call.
pub fn render(spec: &SceneSpec, seed: u64) -> Result<Rendered> {
    Scene::new(spec)?.render(seed)
}

/// A KITTI-like street scene: ground, far wall, ego-motion forward and up to
/// three moving boxes ("cars").
pub fn street_scene(rig: CameraRig, objects: usize) -> SceneSpec {
    let mut spec = SceneSpec::new(rig);
    spec.ego_motion = Twist::from_slice(&[0.02, -0.01, 0.8, 0.002, 0.01, -0.003]);
    let cars = [
        (Vec3::new(-3.2, 0.9, 11.0), 0.25, [0.05, 0.0, 1.2, 0.0, 0.03, 0.0]),
        (Vec3::new(2.8, 0.85, 9.0), -0.4, [0.0, 0.0, -0.9, 0.0, -0.05, 0.0]),
        (Vec3::new(0.3, 0.8, 17.0), 1.2, [0.1, 0.0, 0.7, 0.0, 0.02, 0.0]),
    ];
    for (k, (pos, yaw, motion)) in cars.iter().take(objects).enumerate() {
        let yawed = Twist::from_slice(&[0.0, 0.0, 0.0, 0.0, *yaw, 0.0])
            .exp()
            .expect("finite");
        let pose = RigidMotion::new(*yawed.rotation(), *pos).expect("rotation");
        spec.objects.push(SceneObject::new(
            k as u32 + 1,
            Shape::Box {
                half_extents: Vec3::new(0.9, 0.75, 2.0),
            },
            pose,
            Twist::from_slice(motion),
        ));
    }
    spec
}

/// Relabels the outer `rim` pixels of every foreground instance to the label
/// of the neighbor they border, restricted to pixels where `eligible` holds.
/// Returns the new mask and the relabeled pixel indices (ascending).
pub fn mislabel_rims(seg: &InstanceMask, rim: usize, eligible: &[bool]) -> (InstanceMask, Vec<usize>) {
    let (w, h) = (seg.width, seg.height);
    let original = &seg.labels;
    let mut labels = original.clone();
    let mut changed = Vec::new();
    for _ in 0..rim {
        let current = labels.clone();
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let own = original[i];
                if own == 0 || current[i] != own || !eligible[i] {
                    continue;
                }
                let mut steal = None;
                'nb: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        let l = current[ny as usize * w + nx as usize];
                        if l != own {
                            steal = Some(l);
                            break 'nb;
                        }
                    }
                }
                if let Some(l) = steal {
                    labels[i] = l;
                    changed.push(i);
                }
            }
        }
    }
    changed.sort_unstable();
    (
        InstanceMask {
            width: w,
            height: h,
            labels,
        },
        changed,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_rig() -> CameraRig {
        CameraRig::new(200.0, 200.0, 80.0, 30.0, 0.54, 160, 60).unwrap()
    }

    #[test]
    fn static_scene_has_zero_flow() {
        let spec = street_scene(small_rig(), 0);
        let mut spec = spec;
        spec.ego_motion = Twist::zero();
        let r = render(&spec, 1).unwrap();
        for i in 0..r.gt.flow.u.len() {
            if r.gt.flow.valid[i] {
                assert!(r.gt.flow.u[i].abs() < 1e-9 && r.gt.flow.v[i].abs() < 1e-9);
            }
        }
        assert_eq!(r.frame.disp0.values, r.frame.disp1.values);
    }

    #[test]
    fn approaching_plane_disparity() {
        let rig = small_rig();
        let mut spec = SceneSpec::new(rig);
        spec.background = Background {
            ground_height: None,
            wall_depth: Some(10.0),
            facade_offset: None,
        };
        spec.ego_motion = Twist::from_slice(&[0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let r = render(&spec, 0).unwrap();
        let fb = rig.focal_baseline();
        let (cx, cy) = (80, 30);
        assert!((r.frame.disp0.get(cx, cy).unwrap() - fb / 10.0).abs() < 1e-12);
        assert!((r.frame.disp1.get(cx, cy).unwrap() - fb / 9.0).abs() < 1e-12);
    }

    #[test]
    fn seeds_do_not_matter_without_noise() {
        let spec = street_scene(small_rig(), 2);
        let a = render(&spec, 1).unwrap();
        let b = render(&spec, 2).unwrap();
        assert_eq!(a.frame.left1, b.frame.left1);
        assert_eq!(a.frame.flow_left, b.frame.flow_left);
        assert_eq!(a.gt.disp1, b.gt.disp1);
    }

    #[test]
    fn rigid_consistency_identity() {
        let rig = small_rig();
        let spec = street_scene(rig, 3);
        let scene = Scene::new(&spec).unwrap();
        let r = scene.render(0).unwrap();
        let motions = r.motion_map();
        let mut checked = 0;
        for y in 0..rig.height {
            for x in 0..rig.width {
                let i = y * rig.width + x;
                let Some((u, v)) = r.gt.flow.get(x, y) else { continue };
                let p = Pixel::new(x as f64, y as f64);
                let x0 = rig.back_project(&p, r.frame.disp0.get(x, y).unwrap()).unwrap();
                let x1 = motions[&r.frame.seg.labels[i]].transform_point(&x0);
                let q = rig.project(&x1).unwrap();
                assert!((q.x - (x as f64 + u)).abs() < 1e-9 && (q.y - (y as f64 + v)).abs() < 1e-9);
                let hit = scene.cast(Time::Frame1, Eye::Left, &q).unwrap();
                assert!((rig.focal_baseline() / hit.depth - rig.disparity_of(&x1).unwrap()).abs() < 1e-9);
                assert!((r.gt.disp1.get(x, y).unwrap() - rig.disparity_of(&x1).unwrap()).abs() < 1e-9);
                checked += 1;
            }
        }
        assert!(checked > rig.width * rig.height / 2);
    }

    #[test]
    fn occluded_pixels_are_invalid_in_ground_truth() {
        let rig = small_rig();
        let spec = street_scene(rig, 3);
        let r = render(&spec, 0).unwrap();
        let hidden = (0..r.gt.flow.valid.len())
            .filter(|i| r.frame.flow_left.valid[*i] && !r.gt.flow.valid[*i])
            .count();
        assert!(hidden > 0);
        let mut spec = spec;
        spec.mark_occlusions = false;
        let r2 = render(&spec, 0).unwrap();
        assert!(r2.gt.flow.valid_count() > r.gt.flow.valid_count());
    }

    #[test]
    fn noise_keeps_masks_and_counts_outliers() {
        let mut spec = street_scene(small_rig(), 2);
        spec.noise = NoiseSpec {
            disparity: 0.5,
            flow: 0.5,
            image: 0.0,
        };
        spec.outlier_fraction = 0.3;
        let clean = {
            let mut s = spec.clone();
            s.noise = NoiseSpec::default();
            s.outlier_fraction = 0.0;
            render(&s, 3).unwrap()
        };
        let noisy = render(&spec, 3).unwrap();
        assert_eq!(noisy.frame.disp0.valid, clean.frame.disp0.valid);
        assert_eq!(noisy.frame.disp1.valid, clean.frame.disp1.valid);
        assert_eq!(noisy.frame.flow_left.valid, clean.frame.flow_left.valid);
        let n = clean.frame.flow_left.valid_count();
        assert_eq!(noisy.outlier_pixels.len(), (0.3 * n as f64).round() as usize);
        let again = render(&spec, 3).unwrap();
        assert_eq!(again.frame.flow_left, noisy.frame.flow_left);
    }

    #[test]
    fn invalid_specs() {
        let mut spec = street_scene(small_rig(), 2);
        spec.objects[1].id = 1;
        assert!(spec.validate().is_err());
        let mut spec = street_scene(small_rig(), 1);
        spec.outlier_fraction = 1.0;
        assert!(spec.validate().is_err());
        let mut spec = street_scene(small_rig(), 1);
        spec.objects[0].pose = RigidMotion::from_translation(Vec3::new(0.0, 0.0, -3.0));
        assert!(matches!(Scene::new(&spec), Err(Error::BehindCamera { .. })));
    }

    #[test]
    fn rims_are_relabeled_outside_in() {
        let labels = vec![
            0, 0, 0, 0, 0, //
            0, 1, 1, 1, 0, //
            0, 1, 1, 1, 0, //
            0, 1, 1, 1, 0, //
            0, 0, 0, 0, 0,
        ];
        let seg = InstanceMask::new(5, 5, labels).unwrap();
        let (m, changed) = mislabel_rims(&seg, 1, &[true; 25]);
        assert_eq!(changed.len(), 8);
        assert_eq!(m.get(2, 2), 1);
        assert_eq!(m.count(1), 1);
    }
}
