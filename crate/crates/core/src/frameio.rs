//! Dense observation grids and the dataset's on-disk formats.
//!
//! PNG encodings follow the KITTI devkit:
//!
//! * disparity: 16-bit gray, `d = raw / 256`, `raw == 0` marks an invalid pixel;
//! * flow: 16-bit RGB, `u = (r - 2^15) / 64`, `v = (g - 2^15) / 64`, valid iff `b > 0`;
//! * instance ids: 8- or 16-bit gray, remapped to `0..=n` with 0 the background.
//!
//! A frame directory is laid out as
//!
//! ```text
//! <root>/image_2/<id>_10.png  <root>/image_2/<id>_11.png   left  frame 0 / 1
//! <root>/image_3/<id>_10.png  <root>/image_3/<id>_11.png   right frame 0 / 1
//! <root>/disp_0/<id>.png      <root>/disp_1/<id>.png
//! <root>/flow/<id>.png        <root>/flow_right/<id>.png   (right flow optional)
//! <root>/instance/<id>.png    <root>/calib/<id>.txt        "fx fy cx cy baseline"
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use crate::error::{Error, Result};
use crate::geometry::{CameraRig, Twist};

/// Row-major image with 1 or 3 channels, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ImageGrid {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!("{channels} image channels")));
        }
        if data.len() != width * height * channels {
            return Err(Error::DimensionMismatch(format!(
                "{}x{}x{} image with {} values",
                width,
                height,
                channels,
                data.len()
            )));
        }
        if data.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::InvalidArgument("image values outside [0, 1]".into()));
        }
        Ok(ImageGrid {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        ImageGrid {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Luma with the 0.299/0.587/0.114 weights; a 1-channel grid is returned as is.
    pub fn to_grayscale(&self) -> ImageGrid {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|c| gray(c[0], c[1], c[2]))
            .collect();
        ImageGrid {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }
}

#[inline]
pub fn gray(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Per-pixel scalar with a validity mask (disparities, in pixels).
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl ScalarField {
    pub fn invalid(width: usize, height: usize) -> Self {
        ScalarField {
            width,
            height,
            values: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    pub fn from_values(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} field with {} values",
                values.len()
            )));
        }
        let valid = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Ok(ScalarField {
            width,
            height,
            values,
            valid,
        })
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = self.index(x, y);
        self.valid[i].then(|| self.values[i])
    }

    pub fn set(&mut self, x: usize, y: usize, value: Option<f64>) {
        let i = self.index(x, y);
        match value {
            Some(v) => {
                self.values[i] = v;
                self.valid[i] = true;
            }
            None => {
                self.values[i] = 0.0;
                self.valid[i] = false;
            }
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    /// Disparity invariant: valid values are finite and non-negative.
    pub fn check_disparity(&self) -> Result<()> {
        let bad = self
            .values
            .iter()
            .zip(&self.valid)
            .any(|(v, ok)| *ok && !(v.is_finite() && *v >= 0.0));
        if bad {
            return Err(Error::InvalidArgument("negative or non-finite disparity".into()));
        }
        Ok(())
    }
}

/// Per-pixel displacement `(u, v)` in pixels with a validity mask.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub width: usize,
    pub height: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub valid: Vec<bool>,
}

impl FlowField {
    pub fn invalid(width: usize, height: usize) -> Self {
        FlowField {
            width,
            height,
            u: vec![0.0; width * height],
            v: vec![0.0; width * height],
            valid: vec![false; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        let i = y * self.width + x;
        self.valid[i].then(|| (self.u[i], self.v[i]))
    }

    pub fn set(&mut self, x: usize, y: usize, value: Option<(f64, f64)>) {
        let i = y * self.width + x;
        match value {
            Some((u, v)) => {
                self.u[i] = u;
                self.v[i] = v;
                self.valid[i] = true;
            }
            None => {
                self.u[i] = 0.0;
                self.v[i] = 0.0;
                self.valid[i] = false;
            }
        }
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }
}

/// Per-pixel instance label; 0 is the background.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceMask {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u32>,
}

impl InstanceMask {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::DimensionMismatch(format!(
                "{width}x{height} mask with {} labels",
                labels.len()
            )));
        }
        Ok(InstanceMask {
            width,
            height,
            labels,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Largest label; foreground ids run `1..=max_label()`.
    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Distinct labels present, ascending.
    pub fn ids(&self) -> Vec<u32> {
        self.labels
            .iter()
            .copied()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn count(&self, id: u32) -> usize {
        self.labels.iter().filter(|l| **l == id).count()
    }
}

/// The observation bundle for one frame pair.
#[derive(Clone, Debug)]
pub struct FrameSet {
    pub left0: ImageGrid,
    pub right0: ImageGrid,
    pub left1: ImageGrid,
    pub right1: ImageGrid,
    pub disp0: ScalarField,
    pub disp1: ScalarField,
    pub flow_left: FlowField,
    /// Loaded when present; no energy term reads it.
    pub flow_right: Option<FlowField>,
    pub seg: InstanceMask,
    pub rig: CameraRig,
}

impl FrameSet {
    pub fn validate(&self) -> Result<()> {
        self.rig.validate()?;
        let (w, h) = (self.rig.width, self.rig.height);
        let mut dims: Vec<(&str, usize, usize)> = vec![
            ("left0", self.left0.width, self.left0.height),
            ("right0", self.right0.width, self.right0.height),
            ("left1", self.left1.width, self.left1.height),
            ("right1", self.right1.width, self.right1.height),
            ("disp0", self.disp0.width, self.disp0.height),
            ("disp1", self.disp1.width, self.disp1.height),
            ("flow_left", self.flow_left.width, self.flow_left.height),
            ("seg", self.seg.width, self.seg.height),
        ];
        if let Some(f) = &self.flow_right {
            dims.push(("flow_right", f.width, f.height));
        }
        for (name, fw, fh) in dims {
            if (fw, fh) != (w, h) {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {fw}x{fh}, expected {w}x{h}"
                )));
            }
        }
        let channels = self.left0.channels;
        if [&self.right0, &self.left1, &self.right1]
            .iter()
            .any(|i| i.channels != channels)
        {
            return Err(Error::DimensionMismatch("images differ in channel count".into()));
        }
        self.disp0.check_disparity()?;
        self.disp1.check_disparity()?;
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.rig.width
    }

    pub fn height(&self) -> usize {
        self.rig.height
    }
}

/// Ground-truth maps on the frame-0 pixel grid. `disp1` is the disparity
/// of each frame-0 point after its motion ("disparity 2" in KITTI terms).
#[derive(Clone, Debug)]
pub struct GroundTruthFrame {
    pub rig: CameraRig,
    pub seg: InstanceMask,
    pub disp0: ScalarField,
    pub disp1: ScalarField,
    pub flow: FlowField,
}

impl GroundTruthFrame {
    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.rig.width, self.rig.height);
        for (name, fw, fh) in [
            ("seg", self.seg.width, self.seg.height),
            ("disp0", self.disp0.width, self.disp0.height),
            ("disp1", self.disp1.width, self.disp1.height),
            ("flow", self.flow.width, self.flow.height),
        ] {
            if (fw, fh) != (w, h) {
                return Err(Error::DimensionMismatch(format!(
                    "{name} is {fw}x{fh}, expected {w}x{h}"
                )));
            }
        }
        Ok(())
    }
}

fn open_png(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    Ok(())
}

fn save<P, C>(buffer: ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    ensure_parent(path)?;
    buffer
        .save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path, other.to_string()),
        })
}

pub fn encode_disparity(d: f64) -> u16 {
    (d * 256.0).round().clamp(1.0, 65535.0) as u16
}

pub fn decode_disparity(raw: u16) -> Option<f64> {
    (raw > 0).then(|| raw as f64 / 256.0)
}

pub fn encode_flow_component(x: f64) -> u16 {
    (x * 64.0 + 32768.0).round().clamp(0.0, 65535.0) as u16
}

pub fn decode_flow_component(raw: u16) -> f64 {
    (raw as f64 - 32768.0) / 64.0
}

pub fn read_disparity_png(path: impl AsRef<Path>) -> Result<ScalarField> {
    let path = path.as_ref();
    let img = match open_png(path)? {
        DynamicImage::ImageLuma16(img) => img,
        other => {
            return Err(Error::format(
                path,
                format!("disparity must be 16-bit gray, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut field = ScalarField::invalid(w, h);
    for (i, px) in img.pixels().enumerate() {
        if let Some(d) = decode_disparity(px.0[0]) {
            field.values[i] = d;
            field.valid[i] = true;
        }
    }
    Ok(field)
}

pub fn write_disparity_png(field: &ScalarField, path: impl AsRef<Path>) -> Result<()> {
    let buf = ImageBuffer::from_fn(field.width as u32, field.height as u32, |x, y| {
        let i = y as usize * field.width + x as usize;
        Luma([if field.valid[i] {
            encode_disparity(field.values[i])
        } else {
            0
        }])
    });
    save(buf, path.as_ref())
}

pub fn read_flow_png(path: impl AsRef<Path>) -> Result<FlowField> {
    let path = path.as_ref();
    let img = match open_png(path)? {
        DynamicImage::ImageRgb16(img) => img,
        other => {
            return Err(Error::format(
                path,
                format!("flow must be 16-bit RGB, found {:?}", other.color()),
            ))
        }
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut field = FlowField::invalid(w, h);
    for (i, px) in img.pixels().enumerate() {
        let [r, g, b] = px.0;
        if b > 0 {
            field.u[i] = decode_flow_component(r);
            field.v[i] = decode_flow_component(g);
            field.valid[i] = true;
        }
    }
    Ok(field)
}

pub fn write_flow_png(field: &FlowField, path: impl AsRef<Path>) -> Result<()> {
    let buf = ImageBuffer::from_fn(field.width as u32, field.height as u32, |x, y| {
        let i = y as usize * field.width + x as usize;
        if field.valid[i] {
            Rgb([
                encode_flow_component(field.u[i]),
                encode_flow_component(field.v[i]),
                1,
            ])
        } else {
            Rgb([0, 0, 0])
        }
    });
    save(buf, path.as_ref())
}

/// Reads raw labels and remaps them to `0..=n`; the returned table maps each
/// contiguous id back to its raw label (`table[0]` is always 0).
pub fn read_instance_png(path: impl AsRef<Path>) -> Result<(InstanceMask, Vec<u32>)> {
    let path = path.as_ref();
    let (w, h, raw): (usize, usize, Vec<u32>) = match open_png(path)? {
        DynamicImage::ImageLuma8(img) => (
            img.width() as usize,
            img.height() as usize,
            img.pixels().map(|p| p.0[0] as u32).collect(),
        ),
        DynamicImage::ImageLuma16(img) => (
            img.width() as usize,
            img.height() as usize,
            img.pixels().map(|p| p.0[0] as u32).collect(),
        ),
        other => {
            return Err(Error::format(
                path,
                format!("instance map must be single channel, found {:?}", other.color()),
            ))
        }
    };
    let (labels, table) = relabel_contiguous(&raw);
    Ok((InstanceMask::new(w, h, labels)?, table))
}

pub(crate) fn relabel_contiguous(raw: &[u32]) -> (Vec<u32>, Vec<u32>) {
    let mut table: Vec<u32> = std::iter::once(0)
        .chain(raw.iter().copied().filter(|l| *l != 0))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    table.dedup();
    let labels = raw
        .iter()
        .map(|l| table.binary_search(l).expect("label in table") as u32)
        .collect();
    (labels, table)
}

pub fn write_instance_png(mask: &InstanceMask, path: impl AsRef<Path>) -> Result<()> {
    if mask.max_label() > u16::MAX as u32 {
        return Err(Error::InvalidArgument("instance id exceeds 16 bits".into()));
    }
    let buf = ImageBuffer::from_fn(mask.width as u32, mask.height as u32, |x, y| {
        Luma([mask.get(x as usize, y as usize) as u16])
    });
    save(buf, path.as_ref())
}

/// Reads an 8- or 16-bit gray or RGB(A) PNG, normalized to `[0, 1]`.
pub fn read_image_png(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let img = open_png(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, data): (usize, Vec<f64>) = match img {
        DynamicImage::ImageLuma8(i) => (1, i.into_raw().into_iter().map(|x| x as f64 / 255.0).collect()),
        DynamicImage::ImageLuma16(i) => (1, i.into_raw().into_iter().map(|x| x as f64 / 65535.0).collect()),
        DynamicImage::ImageRgb8(i) => (3, i.into_raw().into_iter().map(|x| x as f64 / 255.0).collect()),
        other => (
            3,
            other
                .into_rgb16()
                .into_raw()
                .into_iter()
                .map(|x| x as f64 / 65535.0)
                .collect(),
        ),
    };
    ImageGrid::new(w, h, channels, data)
}

/// Writes a 16-bit PNG so synthetic renders survive the round trip with
/// sub-1e-5 quantization.
pub fn write_image_png(img: &ImageGrid, path: impl AsRef<Path>) -> Result<()> {
    let q = |x: f64| (x.clamp(0.0, 1.0) * 65535.0).round() as u16;
    let path = path.as_ref();
    match img.channels {
        1 => save(
            ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
                Luma([q(img.get(x as usize, y as usize, 0))])
            }),
            path,
        ),
        _ => save(
            ImageBuffer::from_fn(img.width as u32, img.height as u32, |x, y| {
                let (x, y) = (x as usize, y as usize);
                Rgb([q(img.get(x, y, 0)), q(img.get(x, y, 1)), q(img.get(x, y, 2))])
            }),
            path,
        ),
    }
}

/// Parses `fx fy cx cy baseline`; the image size comes from the caller.
pub fn read_calib(path: impl AsRef<Path>, width: usize, height: usize) -> Result<CameraRig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let nums = text
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format(path, e.to_string()))?;
    if nums.len() != 5 {
        return Err(Error::format(
            path,
            format!("expected 5 numbers (fx fy cx cy baseline), found {}", nums.len()),
        ));
    }
    CameraRig::new(nums[0], nums[1], nums[2], nums[3], nums[4], width, height)
}

pub fn write_calib(rig: &CameraRig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let text = format!(
        "{} {} {} {} {}\n",
        rig.fx, rig.fy, rig.cx, rig.cy, rig.baseline
    );
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One `id vx vy vz wx wy wz` line per instance.
pub fn write_motions(motions: &[(u32, Twist)], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    ensure_parent(path)?;
    let mut text = String::new();
    for (id, t) in motions {
        let a = t.to_array();
        text.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            id, a[0], a[1], a[2], a[3], a[4], a[5]
        ));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_motions(path: impl AsRef<Path>) -> Result<Vec<(u32, Twist)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format(path, format!("line {}: expected `id vx vy vz wx wy wz`", n + 1));
        if fields.len() != 7 {
            return Err(bad());
        }
        let id = fields[0].parse::<u32>().map_err(|_| bad())?;
        let mut x = [0.0; 6];
        for (k, f) in fields[1..].iter().enumerate() {
            x[k] = f.parse::<f64>().map_err(|_| bad())?;
        }
        out.push((id, Twist::from_slice(&x)));
    }
    Ok(out)
}

/// Paths of every file in a frame directory.
#[derive(Clone, Debug)]
pub struct FramePaths {
    pub left0: PathBuf,
    pub left1: PathBuf,
    pub right0: PathBuf,
    pub right1: PathBuf,
    pub disp0: PathBuf,
    pub disp1: PathBuf,
    pub flow: PathBuf,
    pub flow_right: PathBuf,
    pub instance: PathBuf,
    pub calib: PathBuf,
}

impl FramePaths {
    pub fn new(root: impl AsRef<Path>, id: &str) -> Self {
        let root = root.as_ref();
        FramePaths {
            left0: root.join("image_2").join(format!("{id}_10.png")),
            left1: root.join("image_2").join(format!("{id}_11.png")),
            right0: root.join("image_3").join(format!("{id}_10.png")),
            right1: root.join("image_3").join(format!("{id}_11.png")),
            disp0: root.join("disp_0").join(format!("{id}.png")),
            disp1: root.join("disp_1").join(format!("{id}.png")),
            flow: root.join("flow").join(format!("{id}.png")),
            flow_right: root.join("flow_right").join(format!("{id}.png")),
            instance: root.join("instance").join(format!("{id}.png")),
            calib: root.join("calib").join(format!("{id}.txt")),
        }
    }
}

/// Loads and validates one frame; `rig` must match the image size.
pub fn load_frameset(root: impl AsRef<Path>, id: &str, rig: &CameraRig) -> Result<FrameSet> {
    let paths = FramePaths::new(root, id);
    let flow_right = if paths.flow_right.exists() {
        Some(read_flow_png(&paths.flow_right)?)
    } else {
        None
    };
    let frame = FrameSet {
        left0: read_image_png(&paths.left0)?,
        left1: read_image_png(&paths.left1)?,
        right0: read_image_png(&paths.right0)?,
        right1: read_image_png(&paths.right1)?,
        disp0: read_disparity_png(&paths.disp0)?,
        disp1: read_disparity_png(&paths.disp1)?,
        flow_left: read_flow_png(&paths.flow)?,
        flow_right,
        seg: read_instance_png(&paths.instance)?.0,
        rig: *rig,
    };
    frame.validate()?;
    Ok(frame)
}

/// Loads a frame taking intrinsics from `calib/<id>.txt` and the size from
/// the left frame-0 image.
pub fn load_frameset_with_calib(root: impl AsRef<Path>, id: &str) -> Result<FrameSet> {
    let root = root.as_ref();
    let paths = FramePaths::new(root, id);
    let (w, h) = image_size(&paths.left0)?;
    let rig = read_calib(&paths.calib, w, h)?;
    load_frameset(root, id, &rig)
}

fn image_size(path: &Path) -> Result<(usize, usize)> {
    let (w, h) = image::image_dimensions(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })?;
    Ok((w as usize, h as usize))
}

/// Loads ground truth laid out like a frame directory (`disp_0`, `disp_1`,
/// `flow`, `instance`, `calib`), with `disp_1` on the frame-0 grid.
pub fn load_ground_truth(root: impl AsRef<Path>, id: &str) -> Result<GroundTruthFrame> {
    let paths = FramePaths::new(root, id);
    let disp0 = read_disparity_png(&paths.disp0)?;
    let rig = read_calib(&paths.calib, disp0.width, disp0.height)?;
    let gt = GroundTruthFrame {
        rig,
        seg: read_instance_png(&paths.instance)?.0,
        disp0,
        disp1: read_disparity_png(&paths.disp1)?,
        flow: read_flow_png(&paths.flow)?,
    };
    gt.validate()?;
    Ok(gt)
}

pub fn write_ground_truth(gt: &GroundTruthFrame, root: impl AsRef<Path>, id: &str) -> Result<()> {
    let paths = FramePaths::new(root, id);
    write_disparity_png(&gt.disp0, &paths.disp0)?;
    write_disparity_png(&gt.disp1, &paths.disp1)?;
    write_flow_png(&gt.flow, &paths.flow)?;
    write_instance_png(&gt.seg, &paths.instance)?;
    write_calib(&gt.rig, &paths.calib)
}

pub fn write_frameset(frame: &FrameSet, root: impl AsRef<Path>, id: &str) -> Result<()> {
    let paths = FramePaths::new(root, id);
    write_image_png(&frame.left0, &paths.left0)?;
    write_image_png(&frame.left1, &paths.left1)?;
    write_image_png(&frame.right0, &paths.right0)?;
    write_image_png(&frame.right1, &paths.right1)?;
    write_disparity_png(&frame.disp0, &paths.disp0)?;
    write_disparity_png(&frame.disp1, &paths.disp1)?;
    write_flow_png(&frame.flow_left, &paths.flow)?;
    if let Some(f) = &frame.flow_right {
        write_flow_png(f, &paths.flow_right)?;
    }
    write_instance_png(&frame.seg, &paths.instance)?;
    write_calib(&frame.rig, &paths.calib)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    fn write_raw_luma16(path: &Path, w: u32, h: u32, raw: &[u16]) {
        ImageBuffer::<Luma<u16>, _>::from_raw(w, h, raw.to_vec())
            .unwrap()
            .save(path)
            .unwrap();
    }

    fn write_raw_rgb16(path: &Path, w: u32, h: u32, raw: &[u16]) {
        ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, raw.to_vec())
            .unwrap()
            .save(path)
            .unwrap();
    }

    #[test]
    fn disparity_decoding() {
        let dir = tmp();
        let p = dir.path().join("d.png");
        write_raw_luma16(&p, 2, 1, &[256, 0]);
        let f = read_disparity_png(&p).unwrap();
        assert_eq!(f.get(0, 0), Some(1.0));
        assert_eq!(f.get(1, 0), None);
    }

    #[test]
    fn disparity_rejects_8bit() {
        let dir = tmp();
        let p = dir.path().join("d.png");
        ImageBuffer::<Luma<u8>, _>::from_raw(1, 1, vec![3u8]).unwrap().save(&p).unwrap();
        assert!(matches!(read_disparity_png(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn flow_decoding() {
        let dir = tmp();
        let p = dir.path().join("f.png");
        write_raw_rgb16(&p, 3, 1, &[32768, 32768, 1, 32832, 32768, 1, 40000, 1000, 0]);
        let f = read_flow_png(&p).unwrap();
        assert_eq!(f.get(0, 0), Some((0.0, 0.0)));
        assert_eq!(f.get(1, 0), Some((1.0, 0.0)));
        assert_eq!(f.get(2, 0), None);
    }

    #[test]
    fn flow_rejects_gray() {
        let dir = tmp();
        let p = dir.path().join("f.png");
        write_raw_luma16(&p, 1, 1, &[5]);
        assert!(read_flow_png(&p).is_err());
    }

    #[test]
    fn instance_relabeling() {
        let dir = tmp();
        let p = dir.path().join("i.png");
        ImageBuffer::<Luma<u8>, _>::from_raw(2, 2, vec![0u8, 0, 0, 0]).unwrap().save(&p).unwrap();
        let (m, table) = read_instance_png(&p).unwrap();
        assert_eq!(m.max_label(), 0);
        assert_eq!(table, vec![0]);

        ImageBuffer::<Luma<u8>, _>::from_raw(2, 2, vec![0u8, 7, 9, 7]).unwrap().save(&p).unwrap();
        let (m, table) = read_instance_png(&p).unwrap();
        assert_eq!(m.labels, vec![0, 1, 2, 1]);
        assert_eq!(table, vec![0, 7, 9]);

        ImageBuffer::<Rgb<u8>, _>::from_raw(1, 1, vec![1u8, 2, 3]).unwrap().save(&p).unwrap();
        assert!(matches!(read_instance_png(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn instance_without_background_keeps_zero_reserved() {
        let (labels, table) = relabel_contiguous(&[4, 4, 2]);
        assert_eq!(labels, vec![2, 2, 1]);
        assert_eq!(table, vec![0, 2, 4]);
    }

    #[test]
    fn missing_file_is_named() {
        let err = read_flow_png("/nonexistent/flow/000000.png").unwrap_err();
        assert!(matches!(&err, Error::MissingFile(p) if p.ends_with("flow/000000.png")));
    }

    #[test]
    fn calib_parsing() {
        let dir = tmp();
        let p = dir.path().join("c.txt");
        fs::write(&p, "721.5 721.5 609.6 172.9 0.54\n").unwrap();
        let rig = read_calib(&p, 1242, 375).unwrap();
        assert_eq!(rig.fx, 721.5);
        assert_eq!(rig.baseline, 0.54);
        fs::write(&p, "721.5 721.5 609.6\n").unwrap();
        assert!(read_calib(&p, 1, 1).is_err());
        fs::write(&p, "1 1 0 0 -1\n").unwrap();
        assert!(read_calib(&p, 1, 1).is_err());
    }

    #[test]
    fn motions_round_trip() {
        let dir = tmp();
        let p = dir.path().join("m.txt");
        let m = vec![
            (0, Twist::from_slice(&[0.1, -0.2, 0.3, 1e-7, 2.5e-3, -0.04])),
            (3, Twist::from_slice(&[1.0 / 3.0, 0.0, -7.0, 0.0, 0.0, 0.0])),
        ];
        write_motions(&m, &p).unwrap();
        assert_eq!(read_motions(&p).unwrap(), m);
    }

    #[test]
    fn image_round_trip_16bit() {
        let dir = tmp();
        let p = dir.path().join("img.png");
        let data: Vec<f64> = (0..12).map(|i| i as f64 / 11.0).collect();
        let img = ImageGrid::new(2, 2, 3, data).unwrap();
        write_image_png(&img, &p).unwrap();
        let back = read_image_png(&p).unwrap();
        assert_eq!(back.channels, 3);
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= 0.5 / 65535.0 + 1e-15);
        }
    }

    #[test]
    fn grayscale_weights() {
        let img = ImageGrid::new(1, 1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        assert!((img.to_grayscale().data[0] - 0.299).abs() < 1e-15);
    }

    proptest! {
        #[test]
        fn disparity_off_grid_rounding(d in 0.01..255.0f64) {
            let back = decode_disparity(encode_disparity(d)).unwrap();
            prop_assert!((back - d).abs() <= 1.0 / 512.0 + 1e-12);
        }

        #[test]
        fn flow_off_grid_rounding(x in -500.0..500.0f64) {
            let back = decode_flow_component(encode_flow_component(x));
            prop_assert!((back - x).abs() <= 1.0 / 128.0 + 1e-12);
        }
    }
}
