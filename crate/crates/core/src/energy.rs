//! Residuals of the per-instance energy and their Jacobians.
//!
//! Three families are built for an [`InstanceProblem`] at a motion estimate
//! `T`:
//!
//! * photometric: `L0(p) - L1(p')`, one row per channel;
//! * rigid fit: `T * X0(p) - X1(q)` with `q = p + F(p)`, three rows;
//! * flow consistency: `(p' - p) - F(p)`, two rows;
//!
//! where `p' = π(T * π⁻¹(p, D0(p)))`. Jacobians are taken with respect to a
//! twist `ε` applied on the left, `exp(ε) * T`, at `ε = 0`. Each row is
//! penalized by the generalized Charbonnier function `ρ(x) = (x² + ε²)^α`.

use nalgebra::{Matrix2x3, Matrix3x6, RowVector2, RowVector6, Vector3};

use crate::error::{Error, Result};
use crate::frameio::{gray, FrameSet, ImageGrid, ScalarField};
use crate::geometry::{skew, CameraRig, Pixel, RigidMotion, Vec3, D_MIN, Z_MIN};

/// Parameters of the generalized Charbonnier penalty and its IRLS weights.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustConfig {
    pub alpha: f64,
    pub epsilon: f64,
    /// Upper bound on IRLS weights; the raw weight at zero residual is ~1.4e5.
    pub weight_cap: f64,
}

impl Default for RobustConfig {
    fn default() -> Self {
        RobustConfig {
            alpha: 0.45,
            epsilon: 1e-5,
            weight_cap: 1e4,
        }
    }
}

impl RobustConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) || !(self.epsilon > 0.0) || !(self.weight_cap > 0.0) {
            return Err(Error::InvalidArgument(format!("bad robust config {self:?}")));
        }
        Ok(())
    }

    #[inline]
    pub fn value(&self, x: f64) -> f64 {
        (x * x + self.epsilon * self.epsilon).powf(self.alpha)
    }

    /// `α (x² + ε²)^(α-1)`, capped. Minimizing `Σ w r²` with these weights
    /// held fixed has the same stationary points as `Σ ρ(r)`.
    #[inline]
    pub fn weight(&self, x: f64) -> f64 {
        (self.alpha * (x * x + self.epsilon * self.epsilon).powf(self.alpha - 1.0)).min(self.weight_cap)
    }
}

pub fn robust_value(x: f64, cfg: &RobustConfig) -> f64 {
    cfg.value(x)
}

pub fn irls_weight(x: f64, cfg: &RobustConfig) -> f64 {
    cfg.weight(x)
}

/// Per-term multipliers `λ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyWeights {
    pub photo: f64,
    pub rigid: f64,
    pub flow: f64,
}

impl EnergyWeights {
    pub fn new(photo: f64, rigid: f64, flow: f64) -> Result<Self> {
        let w = EnergyWeights { photo, rigid, flow };
        w.validate()?;
        Ok(w)
    }

    /// All terms with unit weight.
    pub fn foreground() -> Self {
        EnergyWeights {
            photo: 1.0,
            rigid: 1.0,
            flow: 1.0,
        }
    }

    /// Photometric term only.
    pub fn background() -> Self {
        EnergyWeights {
            photo: 1.0,
            rigid: 0.0,
            flow: 0.0,
        }
    }

    pub fn rigid_only() -> Self {
        EnergyWeights {
            photo: 0.0,
            rigid: 1.0,
            flow: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.photo, self.rigid, self.flow];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || all.iter().all(|w| *w == 0.0) {
            return Err(Error::InvalidArgument(format!("bad energy weights {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PhotometricMode {
    /// One residual per image channel.
    #[default]
    Rgb,
    /// One residual on the luma of each sample.
    Gray,
}

/// Interpolant used to sample the frame-1 image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Interpolation {
    Bilinear,
    /// Catmull-Rom; continuous gradient, border pixels replicated.
    #[default]
    Bicubic,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnergyConfig {
    pub robust: RobustConfig,
    pub photometric: PhotometricMode,
    pub interpolation: Interpolation,
    /// Apply the inlier mask to the flow term as well.
    pub flow_uses_alpha: bool,
    /// Background pixels are subsampled with a uniform stride to stay under this.
    pub max_background_rows: usize,
}

impl Default for EnergyConfig {
    fn default() -> Self {
        EnergyConfig {
            robust: RobustConfig::default(),
            photometric: PhotometricMode::Rgb,
            interpolation: Interpolation::Bicubic,
            flow_uses_alpha: true,
            max_background_rows: 50_000,
        }
    }
}

/// Bilinear sample of every channel and its image-space gradient. `None`
/// outside `[0, w-1] x [0, h-1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ImageSample {
    pub value: [f64; 3],
    pub dx: [f64; 3],
    pub dy: [f64; 3],
}

#[inline]
fn cell(x: f64, y: f64, w: usize, h: usize) -> Option<(usize, usize, f64, f64)> {
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) || w < 2 || h < 2 {
        return None;
    }
    let x0 = (x.floor() as usize).min(w - 2);
    let y0 = (y.floor() as usize).min(h - 2);
    Some((x0, y0, x - x0 as f64, y - y0 as f64))
}

/// The gradient is the exact derivative of the bilinear interpolant inside the cell.
pub fn sample_image(img: &ImageGrid, x: f64, y: f64) -> Option<ImageSample> {
    let (x0, y0, a, b) = cell(x, y, img.width, img.height)?;
    let mut s = ImageSample {
        value: [0.0; 3],
        dx: [0.0; 3],
        dy: [0.0; 3],
    };
    for c in 0..img.channels {
        let i00 = img.get(x0, y0, c);
        let i10 = img.get(x0 + 1, y0, c);
        let i01 = img.get(x0, y0 + 1, c);
        let i11 = img.get(x0 + 1, y0 + 1, c);
        s.value[c] = (1.0 - b) * ((1.0 - a) * i00 + a * i10) + b * ((1.0 - a) * i01 + a * i11);
        s.dx[c] = (1.0 - b) * (i10 - i00) + b * (i11 - i01);
        s.dy[c] = (1.0 - a) * (i01 - i00) + a * (i11 - i10);
    }
    Some(s)
}

#[inline]
fn catmull_rom(t: f64) -> ([f64; 4], [f64; 4]) {
    let (t2, t3) = (t * t, t * t * t);
    (
        [
            0.5 * (-t3 + 2.0 * t2 - t),
            0.5 * (3.0 * t3 - 5.0 * t2 + 2.0),
            0.5 * (-3.0 * t3 + 4.0 * t2 + t),
            0.5 * (t3 - t2),
        ],
        [
            0.5 * (-3.0 * t2 + 4.0 * t - 1.0),
            0.5 * (9.0 * t2 - 10.0 * t),
            0.5 * (-9.0 * t2 + 8.0 * t + 1.0),
            0.5 * (3.0 * t2 - 2.0 * t),
        ],
    )
}

/// Catmull-Rom sample and its exact gradient; same domain as [`sample_image`].
pub fn sample_image_bicubic(img: &ImageGrid, x: f64, y: f64) -> Option<ImageSample> {
    let (x0, y0, a, b) = cell(x, y, img.width, img.height)?;
    let (wx, dwx) = catmull_rom(a);
    let (wy, dwy) = catmull_rom(b);
    let tap = |base: usize, k: usize, n: usize| (base + k).saturating_sub(1).min(n - 1);
    let mut s = ImageSample {
        value: [0.0; 3],
        dx: [0.0; 3],
        dy: [0.0; 3],
    };
    for c in 0..img.channels {
        for j in 0..4 {
            let yj = tap(y0, j, img.height);
            for i in 0..4 {
                let v = img.get(tap(x0, i, img.width), yj, c);
                s.value[c] += wx[i] * wy[j] * v;
                s.dx[c] += dwx[i] * wy[j] * v;
                s.dy[c] += wx[i] * dwy[j] * v;
            }
        }
    }
    Some(s)
}

pub fn sample_image_with(img: &ImageGrid, x: f64, y: f64, interp: Interpolation) -> Option<ImageSample> {
    match interp {
        Interpolation::Bilinear => sample_image(img, x, y),
        Interpolation::Bicubic => sample_image_bicubic(img, x, y),
    }
}

/// Bilinear sample of a masked field; invalid if any of the four taps is.
pub fn sample_field(field: &ScalarField, x: f64, y: f64) -> Option<f64> {
    let (x0, y0, a, b) = cell(x, y, field.width, field.height)?;
    let v00 = field.get(x0, y0)?;
    let v10 = field.get(x0 + 1, y0)?;
    let v01 = field.get(x0, y0 + 1)?;
    let v11 = field.get(x0 + 1, y0 + 1)?;
    Some((1.0 - b) * ((1.0 - a) * v00 + a * v10) + b * ((1.0 - a) * v01 + a * v11))
}

/// Motion-independent cues of one pixel.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelCue {
    pub x: usize,
    pub y: usize,
    /// Back-projected frame-0 point.
    pub point0: Vec3,
    pub flow: Option<(f64, f64)>,
    /// Frame-1 disparity sampled at `p + F(p)`.
    pub disp1_at_flow: Option<f64>,
    /// Back-projected frame-1 correspondence.
    pub point1: Option<Vec3>,
    pub intensity: [f64; 3],
}

impl PixelCue {
    pub fn pixel(&self) -> Pixel {
        Pixel::new(self.x as f64, self.y as f64)
    }
}

/// One instance's pixels, inlier mask and term weights over a frame.
#[derive(Clone, Debug)]
pub struct InstanceProblem<'a> {
    pub instance_id: u32,
    pub frame: &'a FrameSet,
    /// Sorted by pixel index.
    pub pixels: Vec<PixelCue>,
    pub alpha: Vec<bool>,
    pub weights: EnergyWeights,
    pub config: EnergyConfig,
}

impl<'a> InstanceProblem<'a> {
    /// All pixels labeled `instance_id` with a valid frame-0 disparity; the
    /// background is subsampled per [`EnergyConfig::max_background_rows`].
    pub fn new(
        frame: &'a FrameSet,
        instance_id: u32,
        weights: EnergyWeights,
        config: EnergyConfig,
    ) -> Result<Self> {
        let w = frame.width();
        let mut coords: Vec<(usize, usize)> = frame
            .seg
            .labels
            .iter()
            .enumerate()
            .filter(|(i, l)| **l == instance_id && frame.disp0.valid[*i] && frame.disp0.values[*i] > D_MIN)
            .map(|(i, _)| (i % w, i / w))
            .collect();
        if instance_id == 0 {
            let per_pixel = rows_per_pixel(frame, &weights, &config).max(1);
            let rows = coords.len() * per_pixel;
            if rows > config.max_background_rows {
                let stride = rows.div_ceil(config.max_background_rows.max(1));
                coords = coords.into_iter().step_by(stride).collect();
            }
        }
        Self::with_pixels(frame, instance_id, &coords, weights, config)
    }

    /// Builds a problem on an explicit pixel list (any order); every pixel
    /// must carry `instance_id` and a valid frame-0 disparity.
    pub fn with_pixels(
        frame: &'a FrameSet,
        instance_id: u32,
        coords: &[(usize, usize)],
        weights: EnergyWeights,
        config: EnergyConfig,
    ) -> Result<Self> {
        weights.validate()?;
        config.robust.validate()?;
        let rig = &frame.rig;
        let mut coords = coords.to_vec();
        coords.sort_unstable_by_key(|&(x, y)| y * rig.width + x);
        let mut pixels = Vec::with_capacity(coords.len());
        for (x, y) in coords {
            if x >= rig.width || y >= rig.height || frame.seg.get(x, y) != instance_id {
                return Err(Error::InvalidArgument(format!(
                    "pixel ({x}, {y}) is not in instance {instance_id}"
                )));
            }
            let p = Pixel::new(x as f64, y as f64);
            let d0 = frame.disp0.get(x, y).ok_or(Error::InvalidDisparity(0.0))?;
            let point0 = rig.back_project(&p, d0)?;
            let flow = frame.flow_left.get(x, y);
            let disp1_at_flow = flow.and_then(|(u, v)| sample_field(&frame.disp1, p.x + u, p.y + v));
            let point1 = match (flow, disp1_at_flow) {
                (Some((u, v)), Some(d1)) => rig.back_project(&Pixel::new(p.x + u, p.y + v), d1).ok(),
                _ => None,
            };
            let mut intensity = [0.0; 3];
            for (c, v) in intensity.iter_mut().enumerate().take(frame.left0.channels) {
                *v = frame.left0.get(x, y, c);
            }
            pixels.push(PixelCue {
                x,
                y,
                point0,
                flow,
                disp1_at_flow,
                point1,
                intensity,
            });
        }
        let alpha = vec![true; pixels.len()];
        Ok(InstanceProblem {
            instance_id,
            frame,
            pixels,
            alpha,
            weights,
            config,
        })
    }

    pub fn rig(&self) -> &CameraRig {
        &self.frame.rig
    }

    pub fn inlier_count(&self) -> usize {
        self.alpha.iter().filter(|a| **a).count()
    }

    fn photometric_channels(&self) -> usize {
        match self.config.photometric {
            PhotometricMode::Gray => 1,
            PhotometricMode::Rgb => self.frame.left0.channels,
        }
    }
}

fn rows_per_pixel(frame: &FrameSet, w: &EnergyWeights, cfg: &EnergyConfig) -> usize {
    let photo = match cfg.photometric {
        PhotometricMode::Gray => 1,
        PhotometricMode::Rgb => frame.left0.channels,
    };
    (w.photo > 0.0) as usize * photo + (w.rigid > 0.0) as usize * 3 + (w.flow > 0.0) as usize * 2
}

/// Stacked residual rows with their Jacobians and IRLS weights.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ResidualBlock {
    pub residuals: Vec<f64>,
    pub jacobians: Vec<RowVector6<f64>>,
    pub weights: Vec<f64>,
    /// Index into [`InstanceProblem::pixels`] of each row's source pixel.
    pub pixel: Vec<usize>,
    /// Component (channel or axis) of each row.
    pub component: Vec<u8>,
}

impl ResidualBlock {
    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    fn push(&mut self, pixel: usize, component: u8, r: f64, j: RowVector6<f64>, robust: &RobustConfig) {
        self.residuals.push(r);
        self.jacobians.push(j);
        self.weights.push(robust.weight(r));
        self.pixel.push(pixel);
        self.component.push(component);
    }

    /// `Σ ρ(r)` over the rows.
    pub fn robust_sum(&self, robust: &RobustConfig) -> f64 {
        self.residuals.iter().map(|r| robust.value(*r)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.residuals.iter().all(|r| r.is_finite())
            && self.jacobians.iter().all(|j| j.iter().all(|v| v.is_finite()))
    }
}

/// `d(exp(ε) y)/dε` at `ε = 0`: `[I | -[y]x]`.
#[inline]
pub fn point_jacobian(y: &Vec3) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).fill_with_identity();
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(y)));
    j
}

/// Rigid warp of `p` with disparity `d`; `None` when the moved point is behind the camera.
pub fn warp_pixel(p: &Pixel, d: f64, motion: &RigidMotion, rig: &CameraRig) -> Result<Option<Pixel>> {
    let x = rig.back_project(p, d)?;
    Ok(rig.project(&motion.transform_point(&x)).ok())
}

struct Warp {
    pixel: Pixel,
    // dp'/dε
    jacobian: Matrix2x6,
}

type Matrix2x6 = nalgebra::Matrix2x6<f64>;

fn warp(point0: &Vec3, motion: &RigidMotion, rig: &CameraRig) -> Option<Warp> {
    let moved = motion.transform_point(point0);
    if !(moved.z > Z_MIN) {
        return None;
    }
    let pixel = rig.project(&moved).ok()?;
    let jp: Matrix2x3<f64> = rig.project_jacobian(&moved);
    Some(Warp {
        pixel,
        jacobian: jp * point_jacobian(&moved),
    })
}

pub fn photometric_block(prob: &InstanceProblem, motion: &RigidMotion) -> ResidualBlock {
    let mut block = ResidualBlock::default();
    let rig = prob.rig();
    let robust = &prob.config.robust;
    let target = &prob.frame.left1;
    let gray_mode = prob.config.photometric == PhotometricMode::Gray && target.channels == 3;
    let channels = prob.photometric_channels();
    for (k, px) in prob.pixels.iter().enumerate() {
        if !prob.alpha[k] {
            continue;
        }
        let Some(w) = warp(&px.point0, motion, rig) else { continue };
        let Some(s) = sample_image_with(target, w.pixel.x, w.pixel.y, prob.config.interpolation) else {
            continue;
        };
        if gray_mode {
            let i0 = gray(px.intensity[0], px.intensity[1], px.intensity[2]);
            let v = gray(s.value[0], s.value[1], s.value[2]);
            let grad = RowVector2::new(gray(s.dx[0], s.dx[1], s.dx[2]), gray(s.dy[0], s.dy[1], s.dy[2]));
            block.push(k, 0, i0 - v, -(grad * w.jacobian), robust);
        } else {
            for c in 0..channels {
                let grad = RowVector2::new(s.dx[c], s.dy[c]);
                block.push(k, c as u8, px.intensity[c] - s.value[c], -(grad * w.jacobian), robust);
            }
        }
    }
    block
}

pub fn rigid_block(prob: &InstanceProblem, motion: &RigidMotion) -> ResidualBlock {
    let mut block = ResidualBlock::default();
    let robust = &prob.config.robust;
    for (k, px) in prob.pixels.iter().enumerate() {
        if !prob.alpha[k] {
            continue;
        }
        let Some(point1) = px.point1 else { continue };
        let moved = motion.transform_point(&px.point0);
        let r: Vector3<f64> = moved - point1;
        let j = point_jacobian(&moved);
        for a in 0..3 {
            block.push(k, a as u8, r[a], j.row(a).into_owned(), robust);
        }
    }
    block
}

pub fn flow_block(prob: &InstanceProblem, motion: &RigidMotion) -> ResidualBlock {
    let mut block = ResidualBlock::default();
    let rig = prob.rig();
    let robust = &prob.config.robust;
    for (k, px) in prob.pixels.iter().enumerate() {
        if prob.config.flow_uses_alpha && !prob.alpha[k] {
            continue;
        }
        let Some((u, v)) = px.flow else { continue };
        let Some(w) = warp(&px.point0, motion, rig) else { continue };
        let r = [w.pixel.x - px.x as f64 - u, w.pixel.y - px.y as f64 - v];
        for a in 0..2 {
            block.push(k, a as u8, r[a], w.jacobian.row(a).into_owned(), robust);
        }
    }
    block
}

/// Blocks of the enabled terms, paired with their `λ`.
pub fn enabled_blocks(prob: &InstanceProblem, motion: &RigidMotion) -> Vec<(f64, ResidualBlock)> {
    let w = &prob.weights;
    let mut out = Vec::with_capacity(3);
    if w.photo > 0.0 {
        out.push((w.photo, photometric_block(prob, motion)));
    }
    if w.rigid > 0.0 {
        out.push((w.rigid, rigid_block(prob, motion)));
    }
    if w.flow > 0.0 {
        out.push((w.flow, flow_block(prob, motion)));
    }
    out
}

/// Per-term robust sums (before `λ`) and row counts.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EnergyBreakdown {
    pub photo: f64,
    pub rigid: f64,
    pub flow: f64,
    pub total: f64,
    pub rows: usize,
}

impl EnergyBreakdown {
    pub fn mean(&self) -> f64 {
        self.total / self.rows.max(1) as f64
    }
}

pub fn energy_breakdown(prob: &InstanceProblem, motion: &RigidMotion) -> Result<EnergyBreakdown> {
    let robust = &prob.config.robust;
    let w = &prob.weights;
    let mut e = EnergyBreakdown::default();
    if w.photo > 0.0 {
        let b = photometric_block(prob, motion);
        e.photo = b.robust_sum(robust);
        e.rows += b.len();
    }
    if w.rigid > 0.0 {
        let b = rigid_block(prob, motion);
        e.rigid = b.robust_sum(robust);
        e.rows += b.len();
    }
    if w.flow > 0.0 {
        let b = flow_block(prob, motion);
        e.flow = b.robust_sum(robust);
        e.rows += b.len();
    }
    if e.rows == 0 {
        return Err(Error::EmptyProblem(prob.instance_id));
    }
    e.total = w.photo * e.photo + w.rigid * e.rigid + w.flow * e.flow;
    if !e.total.is_finite() {
        return Err(Error::NonFinite("energy"));
    }
    Ok(e)
}

/// `Σ_terms λ Σ_rows ρ(r)`.
pub fn total_energy(prob: &InstanceProblem, motion: &RigidMotion) -> Result<f64> {
    Ok(energy_breakdown(prob, motion)?.total)
}
