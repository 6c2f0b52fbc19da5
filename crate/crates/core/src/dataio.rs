//! Tensor files, video datasets, synthetic scenes and point-batch sampling.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};
use crate::losses::{bilinear, flow_consistency_weights};
use crate::model::normalize_coord;

pub const TENSOR_MAGIC: &[u8; 4] = b"NVDT";
pub const TENSOR_VERSION: u32 = 1;

/// A tensor read from disk in its stored precision.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested precision (exact when widening).
    pub fn into_real<S: Real>(self) -> Tensor<S> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

/// Serialises a tensor in the `NVDT` layout.
pub fn encode_tensor<S: Real>(t: &Tensor<S>) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(encoded_len(t));
    encode_tensor_into(t, &mut out)?;
    Ok(out)
}

/// Byte length of [`encode_tensor`]'s output.
pub fn encoded_len<S: Real>(t: &Tensor<S>) -> usize {
    10 + 4 * t.ndim() + t.len() * S::PRECISION.byte_width()
}

/// Appends the `NVDT` encoding of `t` to `out`.
pub fn encode_tensor_into<S: Real>(t: &Tensor<S>, out: &mut Vec<u8>) -> Result<()> {
    if t.ndim() > u8::MAX as usize {
        return Err(Error::invalid("tensor rank exceeds 255"));
    }
    out.extend_from_slice(TENSOR_MAGIC);
    out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
    out.push(match S::PRECISION {
        crate::diffcore::Precision::F32 => 0,
        crate::diffcore::Precision::F64 => 1,
    });
    out.push(t.ndim() as u8);
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| Error::invalid("tensor extent exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(out);
    }
    Ok(())
}

/// Parses an `NVDT` byte buffer; `path` is only used in error messages.
pub fn decode_tensor(bytes: &[u8], path: &Path) -> Result<AnyTensor> {
    let fail = |reason: String| Error::TensorFormat {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 10 {
        return Err(fail(format!("file too short ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != TENSOR_MAGIC {
        return Err(fail(format!("bad magic {:?}, expected \"NVDT\"", &bytes[..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != TENSOR_VERSION {
        return Err(fail(format!("unsupported version {version}")));
    }
    let dtype = bytes[8];
    let ndim = bytes[9] as usize;
    let header = 10 + 4 * ndim;
    if bytes.len() < header {
        return Err(fail("truncated header".into()));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_le_bytes(bytes[10 + 4 * i..14 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let width = match dtype {
        0 => 4,
        1 => 8,
        other => return Err(fail(format!("unknown dtype {other}"))),
    };
    let payload = &bytes[header..];
    if payload.len() != count * width {
        return Err(fail(format!(
            "payload size mismatch: expected {} bytes, found {}",
            count * width,
            payload.len()
        )));
    }
    Ok(match dtype {
        0 => AnyTensor::F32(Tensor::new(dims, payload.chunks(4).map(f32::read_le).collect())?),
        _ => AnyTensor::F64(Tensor::new(dims, payload.chunks(8).map(f64::read_le).collect())?),
    })
}

pub fn save_tensor<S: Real>(path: impl AsRef<Path>, t: &Tensor<S>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensor(t)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<AnyTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes, path)
}

pub fn load_tensor<S: Real>(path: impl AsRef<Path>) -> Result<Tensor<S>> {
    Ok(read_tensor(path)?.into_real())
}

/// A video with masks, flows in pixels and precomputed consistency gates.
///
/// `flow_fwd[t]` maps frame `t` to `t + 1` (zero on the last frame);
/// `flow_bwd[t]` maps frame `t` to `t - 1` (zero on the first frame).
#[derive(Clone, Debug, PartialEq)]
pub struct VideoDataset {
    pub id: String,
    /// `[F, H, W, 3]` in `[0, 1]`.
    pub frames: Tensor<f32>,
    /// `[F, H, W]` in `[0, 1]`.
    pub masks: Tensor<f32>,
    /// `[F, H, W, 2]`.
    pub flow_fwd: Tensor<f32>,
    /// `[F, H, W, 2]`.
    pub flow_bwd: Tensor<f32>,
    /// `[F, H, W]` forward gates.
    pub w_fwd: Vec<u8>,
    /// `[F, H, W]` backward gates.
    pub w_bwd: Vec<u8>,
}

impl VideoDataset {
    /// Builds a dataset, validating shapes and ranges and computing the
    /// flow gates with the given cycle threshold (pixels).
    pub fn new(
        id: impl Into<String>,
        frames: Tensor<f32>,
        masks: Tensor<f32>,
        flow_fwd: Tensor<f32>,
        flow_bwd: Tensor<f32>,
        threshold: f64,
    ) -> Result<Self> {
        let id = id.into();
        let s = frames.shape().to_vec();
        if s.len() != 4 || s[3] != 3 || s[0] == 0 || s[1] < 2 || s[2] < 2 {
            return Err(Error::Dataset(format!("{id}: frames must be [F, H, W, 3], got {s:?}")));
        }
        let (f, h, w) = (s[0], s[1], s[2]);
        let check = |name: &str, t: &Tensor<f32>, want: Vec<usize>| {
            if t.shape() != want.as_slice() {
                Err(Error::Dataset(format!(
                    "{id}: {name} has shape {:?}, expected {want:?}",
                    t.shape()
                )))
            } else {
                Ok(())
            }
        };
        check("masks", &masks, vec![f, h, w])?;
        check("flow_fwd", &flow_fwd, vec![f, h, w, 2])?;
        check("flow_bwd", &flow_bwd, vec![f, h, w, 2])?;
        let in_unit = |t: &Tensor<f32>| t.data().iter().all(|x| (0.0..=1.0).contains(x));
        if !in_unit(&frames) || !in_unit(&masks) {
            return Err(Error::Dataset(format!("{id}: colours and masks must lie in [0, 1]")));
        }
        if !flow_fwd.all_finite() || !flow_bwd.all_finite() {
            return Err(Error::Dataset(format!("{id}: non-finite flow")));
        }
        let plane = h * w;
        let mut w_fwd = vec![0u8; f * plane];
        let mut w_bwd = vec![0u8; f * plane];
        for t in 0..f {
            let fwd = &flow_fwd.data()[t * plane * 2..(t + 1) * plane * 2];
            let bwd = &flow_bwd.data()[t * plane * 2..(t + 1) * plane * 2];
            if t + 1 < f {
                let next_bwd = &flow_bwd.data()[(t + 1) * plane * 2..(t + 2) * plane * 2];
                w_fwd[t * plane..(t + 1) * plane].copy_from_slice(&flow_consistency_weights(fwd, next_bwd, h, w, threshold));
            }
            if t > 0 {
                let prev_fwd = &flow_fwd.data()[(t - 1) * plane * 2..t * plane * 2];
                w_bwd[t * plane..(t + 1) * plane].copy_from_slice(&flow_consistency_weights(bwd, prev_fwd, h, w, threshold));
            }
        }
        Ok(Self {
            id,
            frames,
            masks,
            flow_fwd,
            flow_bwd,
            w_fwd,
            w_bwd,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn pixel_count(&self) -> usize {
        self.frame_count() * self.height() * self.width()
    }

    fn index(&self, t: usize, r: usize, c: usize) -> usize {
        (t * self.height() + r) * self.width() + c
    }

    pub fn color(&self, t: usize, r: usize, c: usize) -> [f32; 3] {
        let i = self.index(t, r, c) * 3;
        let d = self.frames.data();
        [d[i], d[i + 1], d[i + 2]]
    }

    pub fn mask(&self, t: usize, r: usize, c: usize) -> f32 {
        self.masks.data()[self.index(t, r, c)]
    }

    /// Writes `frames.nvdt`, `masks.nvdt`, `flow_fwd.nvdt` and
    /// `flow_bwd.nvdt` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        save_tensor(dir.join("frames.nvdt"), &self.frames)?;
        save_tensor(dir.join("masks.nvdt"), &self.masks)?;
        save_tensor(dir.join("flow_fwd.nvdt"), &self.flow_fwd)?;
        save_tensor(dir.join("flow_bwd.nvdt"), &self.flow_bwd)
    }

    /// Writes `frame_%04d.png` and `mask_%04d.png` into `dir`.
    pub fn save_pngs(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (h, w) = (self.height(), self.width());
        for t in 0..self.frame_count() {
            let rgb = &self.frames.data()[t * h * w * 3..(t + 1) * h * w * 3];
            write_png(dir.join(format!("frame_{t:04}.png")), w, h, 3, rgb)?;
            let m = &self.masks.data()[t * h * w..(t + 1) * h * w];
            write_png(dir.join(format!("mask_{t:04}.png")), w, h, 1, m)?;
        }
        Ok(())
    }
}

fn to_u8(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes an 8-bit RGB (`channels == 3`) or grayscale (`channels == 1`) PNG
/// from values in `[0, 1]`.
pub fn write_png<S: Real>(path: impl AsRef<Path>, width: usize, height: usize, channels: usize, data: &[S]) -> Result<()> {
    let path = path.as_ref();
    let img_err = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(match channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(img_err(format!("unsupported channel count {c}"))),
    });
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = data.iter().map(|x| to_u8(x.to_f64_lossy())).collect();
    let mut writer = enc.write_header().map_err(|e| img_err(e.to_string()))?;
    writer.write_image_data(&bytes).map_err(|e| img_err(e.to_string()))?;
    writer.finish().map_err(|e| img_err(e.to_string()))
}

/// Reads an 8-bit PNG, returning `(width, height, channels, values in [0, 1])`.
/// Only 8-bit RGB and grayscale images are accepted.
pub fn read_png(path: impl AsRef<Path>) -> Result<(usize, usize, usize, Vec<f32>)> {
    let path = path.as_ref();
    let img_err = |reason: String| Error::Image {
        path: path.to_path_buf(),
        reason,
    };
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| img_err(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| img_err("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(|e| img_err(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(img_err(format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    let channels = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Grayscale => 1,
        other => return Err(img_err(format!("unsupported colour type {other:?}"))),
    };
    let data = buf[..info.buffer_size()].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((info.width as usize, info.height as usize, channels, data))
}

fn png_sequence(dir: &Path, prefix: &str, channels: usize) -> Result<Option<(usize, usize, usize, Vec<f32>)>> {
    let mut out = Vec::new();
    let mut dims = None;
    let mut t = 0;
    loop {
        let p = dir.join(format!("{prefix}_{t:04}.png"));
        if !p.exists() {
            break;
        }
        let (w, h, c, data) = read_png(&p)?;
        if c != channels {
            return Err(Error::Dataset(format!("{}: expected {channels} channels, found {c}", p.display())));
        }
        match dims {
            None => dims = Some((w, h)),
            Some(d) if d != (w, h) => {
                return Err(Error::Dataset(format!("{}: size {w}x{h} differs from earlier frames", p.display())))
            }
            _ => {}
        }
        out.extend(data);
        t += 1;
    }
    Ok(dims.map(|(w, h)| (t, h, w, out)))
}

fn load_frames(dir: &Path, name: &str, prefix: &str, channels: usize) -> Result<Tensor<f32>> {
    let nvdt = dir.join(format!("{name}.nvdt"));
    if nvdt.exists() {
        return load_tensor(&nvdt);
    }
    match png_sequence(dir, prefix, channels)? {
        Some((f, h, w, data)) => {
            let shape = if channels == 1 { vec![f, h, w] } else { vec![f, h, w, channels] };
            Tensor::new(shape, data)
        }
        None => Err(Error::Dataset(format!(
            "{}: neither {name}.nvdt nor {prefix}_0000.png found",
            dir.display()
        ))),
    }
}

/// Loads `dir/{frames.nvdt | frame_%04d.png, masks.nvdt | mask_%04d.png,
/// flow_fwd.nvdt, flow_bwd.nvdt}`. The dataset id is the directory name.
pub fn load_video_dataset(dir: impl AsRef<Path>, threshold: f64) -> Result<VideoDataset> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::Dataset(format!("{} is not a directory", dir.display())));
    }
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "video".into());
    let frames = load_frames(dir, "frames", "frame", 3)?;
    let masks = load_frames(dir, "masks", "mask", 1)?;
    let flow_fwd = load_tensor(dir.join("flow_fwd.nvdt"))?;
    let flow_bwd = load_tensor(dir.join("flow_bwd.nvdt"))?;
    VideoDataset::new(id, frames, masks, flow_fwd, flow_bwd, threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpriteShape {
    Rectangle,
    Disk,
}

/// A textured sprite translating over a static textured background.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthSceneSpec {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub background_seed: u64,
    pub sprite_seed: u64,
    pub shape: SpriteShape,
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// Side length (rectangle) or diameter (disk) in pixels.
    pub sprite_size: f64,
    /// Sprite centre in frame 0, pixels.
    pub start: (f64, f64),
}

impl SynthSceneSpec {
    /// A `size x size x frames` scene whose sprite path is centred in the
    /// frame.
    pub fn centred(size: usize, frames: usize, seed: u64, velocity: (f64, f64)) -> Self {
        let sprite_size = (size as f64 * 0.3).round().max(3.0);
        let mid = (size as f64 - 1.0) / 2.0;
        let travel = frames.saturating_sub(1) as f64;
        let shape = if seed % 2 == 0 { SpriteShape::Rectangle } else { SpriteShape::Disk };
        Self {
            height: size,
            width: size,
            frames,
            background_seed: seed.wrapping_mul(2).wrapping_add(1),
            sprite_seed: seed.wrapping_mul(2).wrapping_add(2),
            shape,
            velocity,
            sprite_size,
            start: (mid - velocity.0 * travel / 2.0, mid - velocity.1 * travel / 2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 || self.frames < 1 {
            return Err(Error::invalid("scene needs at least 2x2 pixels and one frame"));
        }
        if !(self.sprite_size >= 1.0) {
            return Err(Error::invalid("sprite size must be at least one pixel"));
        }
        let half = self.sprite_size / 2.0;
        for t in [0, self.frames - 1] {
            let (cx, cy) = self.centre(t);
            if cx - half < 0.0 || cy - half < 0.0 || cx + half > (self.width - 1) as f64 || cy + half > (self.height - 1) as f64 {
                return Err(Error::invalid(format!("sprite leaves the frame at t={t}")));
            }
        }
        Ok(())
    }

    pub fn centre(&self, t: usize) -> (f64, f64) {
        (self.start.0 + t as f64 * self.velocity.0, self.start.1 + t as f64 * self.velocity.1)
    }
}

/// Smooth random colour field: a sum of low-frequency sinusoids per channel.
struct BandLimited {
    waves: Vec<[f64; 5]>,
    base: [f64; 3],
}

impl BandLimited {
    fn new(seed: u64, min_wavelength: f64, max_wavelength: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = [rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7)];
        let mut waves = Vec::with_capacity(12);
        for channel in 0..3 {
            for _ in 0..4 {
                let lambda = rng.random_range(min_wavelength..max_wavelength);
                let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                let k = std::f64::consts::TAU / lambda;
                waves.push([
                    channel as f64,
                    k * theta.cos(),
                    k * theta.sin(),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.04..0.08),
                ]);
            }
        }
        Self { waves, base }
    }

    fn at(&self, x: f64, y: f64) -> [f64; 3] {
        let mut c = self.base;
        for w in &self.waves {
            c[w[0] as usize] += w[4] * (w[1] * x + w[2] * y + w[3]).sin();
        }
        c
    }
}

/// Fraction of pixel `(x, y)` covered by the sprite centred at `(cx, cy)`,
/// with a one-pixel linear ramp at the edge.
fn coverage(shape: SpriteShape, size: f64, cx: f64, cy: f64, x: f64, y: f64) -> f64 {
    let half = size / 2.0;
    let dist = match shape {
        SpriteShape::Rectangle => ((x - cx).abs() - half).max((y - cy).abs() - half),
        SpriteShape::Disk => ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - half,
    };
    (0.5 - dist).clamp(0.0, 1.0)
}

/// Renders a synthetic scene with exact masks and analytic flows.
pub fn synth_generate(spec: &SynthSceneSpec) -> Result<VideoDataset> {
    spec.validate()?;
    let (f, h, w) = (spec.frames, spec.height, spec.width);
    let bg = BandLimited::new(spec.background_seed, 18.0, 48.0);
    let sprite = BandLimited::new(spec.sprite_seed, 20.0, 40.0);
    let mut frames = Vec::with_capacity(f * h * w * 3);
    let mut masks = Vec::with_capacity(f * h * w);
    let mut flow_fwd = vec![0.0f32; f * h * w * 2];
    let mut flow_bwd = vec![0.0f32; f * h * w * 2];
    let (vx, vy) = spec.velocity;
    for t in 0..f {
        let (cx, cy) = spec.centre(t);
        for r in 0..h {
            for c in 0..w {
                let (x, y) = (c as f64, r as f64);
                let m = coverage(spec.shape, spec.sprite_size, cx, cy, x, y);
                let b = bg.at(x, y);
                let s = sprite.at(x - cx, y - cy);
                for k in 0..3 {
                    frames.push(((1.0 - m) * b[k] + m * s[k]).clamp(0.0, 1.0) as f32);
                }
                masks.push(m as f32);
                if m >= 0.5 {
                    let i = ((t * h + r) * w + c) * 2;
                    if t + 1 < f {
                        flow_fwd[i] = vx as f32;
                        flow_fwd[i + 1] = vy as f32;
                    }
                    if t > 0 {
                        flow_bwd[i] = -vx as f32;
                        flow_bwd[i + 1] = -vy as f32;
                    }
                }
            }
        }
    }
    VideoDataset::new(
        format!("synth{}", spec.background_seed),
        Tensor::new([f, h, w, 3], frames)?,
        Tensor::new([f, h, w], masks)?,
        Tensor::new([f, h, w, 2], flow_fwd)?,
        Tensor::new([f, h, w, 2], flow_bwd)?,
        1.0,
    )
}

/// Generates a scene and writes it (tensor files plus PNG previews) to
/// `out_dir`, whose name becomes the dataset id.
pub fn synth_write(spec: &SynthSceneSpec, out_dir: impl AsRef<Path>) -> Result<VideoDataset> {
    let out_dir = out_dir.as_ref();
    let mut ds = synth_generate(spec)?;
    if let Some(name) = out_dir.file_name() {
        ds.id = name.to_string_lossy().into_owned();
    }
    ds.save(out_dir)?;
    ds.save_pngs(out_dir)?;
    let meta = serde_json::to_string_pretty(spec).map_err(|e| Error::invalid(e.to_string()))?;
    fs::write(out_dir.join("scene.json"), meta).map_err(|e| Error::io(out_dir, e))?;
    Ok(ds)
}

/// A sampled training batch of `n` anchors.
#[derive(Clone, Debug)]
pub struct PointBatch<S> {
    pub n: usize,
    /// Frame index of each anchor.
    pub frames: Vec<usize>,
    /// `[p; p_x; p_y]`, `[3n, 3]`, normalised.
    pub coords: Tensor<S>,
    /// Ground-truth colours at `coords`, `[3n, 3]`.
    pub color: Tensor<S>,
    /// Masks at `coords`, `[3n, 1]`.
    pub mask: Tensor<S>,
    /// Anchors whose right and down neighbours lie inside the frame.
    pub grad_valid: Vec<bool>,
    /// Flow targets `[q_fwd; q_bwd]`, `[2n, 3]`, normalised.
    pub flow_coords: Tensor<S>,
    /// Direction exists, target in bounds, and gate `w = 1`; length `2n`.
    pub flow_gate: Vec<bool>,
    /// Direction exists and target in bounds, regardless of `w`.
    pub flow_included: Vec<bool>,
    /// Residual patches at two frames, each `[P * k^2, 3]`.
    pub patch_t1: Tensor<S>,
    pub patch_t2: Tensor<S>,
}

/// Uniform anchors over all `(frame, row, col)` plus `patches` residual
/// patches of side `k` at shared pixel positions in two random frames.
pub fn sample_point_batch<S: Real, R: Rng>(
    ds: &VideoDataset,
    n: usize,
    patches: usize,
    k: usize,
    rng: &mut R,
) -> Result<PointBatch<S>> {
    if n == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    let (f, h, w) = (ds.frame_count(), ds.height(), ds.width());
    if k > h || k > w {
        return Err(Error::invalid("patch larger than the frame"));
    }
    let norm = |t: usize, r: f64, c: f64| -> [f64; 3] {
        let tn = normalize_coord(t, 0, 0, f, h, w)[2];
        [2.0 * c / (w - 1) as f64 - 1.0, 2.0 * r / (h - 1) as f64 - 1.0, tn]
    };
    let mut anchors = Vec::with_capacity(n);
    for _ in 0..n {
        anchors.push((rng.random_range(0..f), rng.random_range(0..h), rng.random_range(0..w)));
    }
    let mut coords = vec![Vec::with_capacity(n * 3); 3];
    let mut color = vec![Vec::with_capacity(n * 3); 3];
    let mut mask = vec![Vec::with_capacity(n); 3];
    let mut grad_valid = Vec::with_capacity(n);
    for &(t, r, c) in &anchors {
        let nx = (c + 1).min(w - 1);
        let ny = (r + 1).min(h - 1);
        grad_valid.push(c + 1 < w && r + 1 < h);
        for (slot, (rr, cc)) in [(r, c), (r, nx), (ny, c)].into_iter().enumerate() {
            coords[slot].extend(normalize_coord(t, rr, cc, f, h, w));
            color[slot].extend(ds.color(t, rr, cc).iter().map(|&x| x as f64));
            mask[slot].push(ds.mask(t, rr, cc) as f64);
        }
    }
    let mut flow_coords = Vec::with_capacity(2 * n * 3);
    let mut flow_gate = Vec::with_capacity(2 * n);
    let mut flow_included = Vec::with_capacity(2 * n);
    let plane = h * w;
    for fwd in [true, false] {
        for &(t, r, c) in &anchors {
            let i = (t * plane + r * w + c) * 2;
            let (flow, gates) = if fwd { (&ds.flow_fwd, &ds.w_fwd) } else { (&ds.flow_bwd, &ds.w_bwd) };
            let exists = if fwd { t + 1 < f } else { t > 0 };
            let (dx, dy) = (flow.data()[i] as f64, flow.data()[i + 1] as f64);
            let (qx, qy) = (c as f64 + dx, r as f64 + dy);
            let inside = (0.0..=(w - 1) as f64).contains(&qx) && (0.0..=(h - 1) as f64).contains(&qy);
            let included = exists && inside;
            let tq = if !exists { t } else if fwd { t + 1 } else { t - 1 };
            let q = if included { norm(tq, qy, qx) } else { normalize_coord(t, r, c, f, h, w) };
            flow_coords.extend(q);
            flow_included.push(included);
            flow_gate.push(included && gates[t * plane + r * w + c] == 1);
        }
    }
    let half = k / 2;
    let mut patch_t1 = Vec::with_capacity(patches * k * k * 3);
    let mut patch_t2 = Vec::with_capacity(patches * k * k * 3);
    for _ in 0..patches {
        let r0 = rng.random_range(half..h - (k - half - 1));
        let c0 = rng.random_range(half..w - (k - half - 1));
        let t1 = rng.random_range(0..f);
        let t2 = if f > 1 { (t1 + rng.random_range(1..f)) % f } else { t1 };
        for dr in 0..k {
            for dc in 0..k {
                let (r, c) = (r0 + dr - half, c0 + dc - half);
                patch_t1.extend(normalize_coord(t1, r, c, f, h, w));
                patch_t2.extend(normalize_coord(t2, r, c, f, h, w));
            }
        }
    }
    let to = |v: Vec<f64>, shape: Vec<usize>| Tensor::<S>::from_f64(shape, &v);
    let stack = |parts: Vec<Vec<f64>>| parts.into_iter().flatten().collect::<Vec<_>>();
    Ok(PointBatch {
        n,
        frames: anchors.iter().map(|a| a.0).collect(),
        coords: to(stack(coords), vec![3 * n, 3])?,
        color: to(stack(color), vec![3 * n, 3])?,
        mask: to(stack(mask), vec![3 * n, 1])?,
        grad_valid,
        flow_coords: to(flow_coords, vec![2 * n, 3])?,
        flow_gate,
        flow_included,
        patch_t1: to(patch_t1, vec![patches * k * k, 3])?,
        patch_t2: to(patch_t2, vec![patches * k * k, 3])?,
    })
}

/// Random stream for training iteration `iteration` of a run seeded `seed`;
/// independent of how many iterations ran before, so runs can resume.
pub fn iteration_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iteration);
    rng
}

/// Fraction of `(pixel, direction)` pairs with a defined, in-bounds flow
/// target whose gate is 1.
pub fn gate_coverage(ds: &VideoDataset) -> f64 {
    let (f, h, w) = (ds.frame_count(), ds.height(), ds.width());
    let plane = h * w;
    let (mut total, mut ok) = (0usize, 0usize);
    for t in 0..f {
        for r in 0..h {
            for c in 0..w {
                let i = t * plane + r * w + c;
                for (fwd, gates) in [(true, &ds.w_fwd), (false, &ds.w_bwd)] {
                    let exists = if fwd { t + 1 < f } else { t > 0 };
                    if !exists {
                        continue;
                    }
                    let flow = if fwd { &ds.flow_fwd } else { &ds.flow_bwd };
                    let (qx, qy) = (c as f64 + flow.data()[i * 2] as f64, r as f64 + flow.data()[i * 2 + 1] as f64);
                    if (0.0..=(w - 1) as f64).contains(&qx) && (0.0..=(h - 1) as f64).contains(&qy) {
                        total += 1;
                        ok += gates[i] as usize;
                    }
                }
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        ok as f64 / total as f64
    }
}

/// Bilinear sample of frame `t` at pixel position `(x, y)`.
pub fn sample_frame(ds: &VideoDataset, t: usize, x: f64, y: f64) -> [f64; 3] {
    let (h, w) = (ds.height(), ds.width());
    let plane = &ds.frames.data()[t * h * w * 3..(t + 1) * h * w * 3];
    let v = bilinear(plane, h, w, 3, x, y);
    [v[0], v[1], v[2]]
}

/// `dir/<id>.emb.nvdt`.
pub fn embedding_path(dir: impl AsRef<Path>, id: &str) -> PathBuf {
    dir.as_ref().join(format!("{id}.emb.nvdt"))
}
