//! Texture atlases: rendering, editing, recomposition and PNG exchange.

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataio::{read_png, write_png};
use crate::diffcore::{ParamStore, Real, Tape, Tensor};
use crate::error::{Error, Result};
use crate::losses::bilinear;
use crate::model::{
    alpha_value, compose, map_points, normalize_coord, residual_coeff, texture_color, LayerIndex, NvdArch, NvdVars,
};

pub const DEFAULT_ATLAS_SIZE: usize = 1000;

/// Rendered canonical appearance of one layer on a `size x size` grid.
/// Pixel `(i, j)` holds the texture at `uv = (2j/(G-1) - 1, 2i/(G-1) - 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TextureAtlas {
    pub layer: LayerIndex,
    pub size: usize,
    /// Interleaved RGB, row-major, `size * size * 3`.
    pub pixels: Vec<f64>,
}

impl TextureAtlas {
    pub fn new(layer: LayerIndex, size: usize, pixels: Vec<f64>) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid(format!("atlas size must be at least 2, got {size}")));
        }
        if pixels.len() != size * size * 3 {
            return Err(Error::ShapeMismatch {
                op: "atlas",
                lhs: vec![size, size, 3],
                rhs: vec![pixels.len()],
            });
        }
        Ok(Self { layer, size, pixels })
    }

    /// Texture coordinate of pixel `(row, col)`.
    pub fn uv_of(&self, row: usize, col: usize) -> [f64; 2] {
        let g = (self.size - 1) as f64;
        [2.0 * col as f64 / g - 1.0, 2.0 * row as f64 / g - 1.0]
    }

    /// Same-sized atlas with replaced pixels.
    pub fn edited(&self, pixels: Vec<f64>) -> Result<Self> {
        Self::new(self.layer, self.size, pixels)
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.size + col) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    /// Bilinear sample at each `[u, v]`; out-of-range coordinates clamp to
    /// the border.
    pub fn sample(&self, uv: &[[f64; 2]]) -> Vec<[f64; 3]> {
        let g = (self.size - 1) as f64;
        uv.iter()
            .map(|&[u, v]| {
                let c = bilinear(&self.pixels, self.size, self.size, 3, (u + 1.0) * 0.5 * g, (v + 1.0) * 0.5 * g);
                [c[0], c[1], c[2]]
            })
            .collect()
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        write_png(path, self.size, self.size, 3, &self.pixels)
    }

    /// Reads an 8-bit RGB atlas image for `layer`.
    pub fn load_png(path: impl AsRef<Path>, layer: LayerIndex) -> Result<Self> {
        let path = path.as_ref();
        let (w, h, ch, data) = read_png(path)?;
        if ch != 3 || w != h {
            return Err(Error::Image {
                path: path.to_path_buf(),
                reason: format!("atlas must be a square RGB image, got {w}x{h} with {ch} channels"),
            });
        }
        Self::new(layer, w, data.iter().map(|&x| x as f64).collect())
    }
}

/// Evaluates the texture network of `layer` on a `size x size` grid, without
/// residuals.
pub fn render_atlas<S: Real>(arch: &NvdArch, params: &ParamStore<S>, layer: LayerIndex, size: usize) -> Result<TextureAtlas> {
    if size < 2 {
        return Err(Error::invalid(format!("atlas size must be at least 2, got {size}")));
    }
    if layer >= arch.layer_count() {
        return Err(Error::invalid(format!("layer {layer} out of range")));
    }
    let g = (size - 1) as f64;
    let total = size * size;
    let chunk = 1 << 16;
    let mut pixels = Vec::with_capacity(total * 3);
    let mut start = 0;
    while start < total {
        let end = (start + chunk).min(total);
        let uv: Vec<S> = (start..end)
            .flat_map(|k| {
                let (i, j) = (k / size, k % size);
                [S::from_f64_lossy(2.0 * j as f64 / g - 1.0), S::from_f64_lossy(2.0 * i as f64 / g - 1.0)]
            })
            .collect();
        let mut tape = Tape::new(params.view());
        let vars = NvdVars::from_store(&mut tape, params, arch)?;
        let uv = tape.constant(Tensor::new([end - start, 2], uv)?)?;
        let c = texture_color(&mut tape, arch, &vars, layer, uv)?;
        pixels.extend(tape.value(c).to_f64_vec());
        start = end;
    }
    TextureAtlas::new(layer, size, pixels)
}

/// Re-renders an `frames x height x width` video, taking each edited layer's
/// colour from its atlas and the others from the texture network. Residuals
/// and opacities come from the model. Returns `[F, H, W, 3]` clamped to
/// `[0, 1]`.
pub fn recompose_video<S: Real>(
    arch: &NvdArch,
    params: &ParamStore<S>,
    edits: &[Option<&TextureAtlas>],
    frames: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<f64>> {
    let layers = arch.layer_count();
    if edits.len() != layers {
        return Err(Error::ShapeMismatch {
            op: "recompose edits",
            lhs: vec![layers],
            rhs: vec![edits.len()],
        });
    }
    for (l, e) in edits.iter().enumerate() {
        if let Some(e) = e {
            if e.layer != l {
                return Err(Error::invalid(format!("atlas for layer {} given in slot {l}", e.layer)));
            }
        }
    }
    if frames == 0 || height == 0 || width == 0 {
        return Err(Error::invalid("empty video dimensions"));
    }
    let total = frames * height * width;
    let chunk = 1 << 14;
    let mut out = Vec::with_capacity(total * 3);
    let mut start = 0;
    while start < total {
        let end = (start + chunk).min(total);
        let n = end - start;
        let mut coords = Vec::with_capacity(n * 3);
        for k in start..end {
            let (f, rest) = (k / (height * width), k % (height * width));
            let c = normalize_coord(f, rest / width, rest % width, frames, height, width);
            coords.extend(c.iter().map(|&x| S::from_f64_lossy(x)));
        }
        let mut tape = Tape::new(params.view());
        let vars = NvdVars::from_store(&mut tape, params, arch)?;
        let p = tape.constant(Tensor::new([n, 3], coords)?)?;
        let mut lit = Vec::with_capacity(layers);
        for (l, edit) in edits.iter().enumerate() {
            let uv = map_points(&mut tape, &vars, l, p)?;
            let color = match edit {
                Some(atlas) => {
                    let uvs: Vec<[f64; 2]> = tape
                        .value(uv)
                        .data()
                        .chunks_exact(2)
                        .map(|c| [c[0].to_f64_lossy(), c[1].to_f64_lossy()])
                        .collect();
                    let data = atlas.sample(&uvs).into_iter().flatten().map(S::from_f64_lossy).collect();
                    tape.constant(Tensor::new([n, 3], data)?)?
                }
                None => texture_color(&mut tape, arch, &vars, l, uv)?,
            };
            let r = residual_coeff(&mut tape, arch, &vars, l, p)?;
            lit.push(tape.mul_col(color, r)?);
        }
        let alpha = alpha_value(&mut tape, &vars, p)?;
        let c = compose(&mut tape, &lit, alpha)?;
        out.extend(tape.value(c).data().iter().map(|x| x.to_f64_lossy().clamp(0.0, 1.0)));
        start = end;
    }
    Tensor::new([frames, height, width, 3], out)
}

/// Sidecar path written next to an exported atlas image.
pub fn sidecar_path(png: impl AsRef<Path>) -> PathBuf {
    let mut s = png.as_ref().as_os_str().to_os_string();
    s.push(".txt");
    PathBuf::from(s)
}

/// Layer letter used on the command line and in sidecars.
pub fn layer_label(arch: &NvdArch, layer: LayerIndex) -> String {
    match (layer, arch.foreground_layers) {
        (0, _) => "b".into(),
        (1, 1) => "f".into(),
        (l, _) => format!("f{}", l - 1),
    }
}

/// Inverse of [`layer_label`].
pub fn parse_layer(arch: &NvdArch, label: &str) -> Result<LayerIndex> {
    let layer = match label {
        "b" => 0,
        "f" if arch.foreground_layers == 1 => 1,
        s => match s.strip_prefix('f').and_then(|k| k.parse::<usize>().ok()) {
            Some(k) if k < arch.foreground_layers => k + 1,
            _ => return Err(Error::invalid(format!("unknown layer `{label}`"))),
        },
    };
    Ok(layer)
}

/// Writes the atlas PNG and its `layer=.. size=.. checkpoint_sha256=..` sidecar.
pub fn export_atlas(atlas: &TextureAtlas, arch: &NvdArch, png: impl AsRef<Path>, checkpoint_digest: &str) -> Result<()> {
    let png = png.as_ref();
    atlas.save_png(png)?;
    let side = sidecar_path(png);
    let text = format!(
        "layer={}\nsize={}\ncheckpoint_sha256={checkpoint_digest}\n",
        layer_label(arch, atlas.layer),
        atlas.size
    );
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}
