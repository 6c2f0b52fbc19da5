//! The layered decomposition network: per-layer mapping, texture and
//! residual modules, a shared alpha module, and back-to-front compositing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{cst, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::mrhe::{encode, HashGridSpec};

/// Architecture of a decomposition model. Tensor names and shapes are a
/// pure function of this value.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NvdArch {
    pub mapping_hidden: usize,
    pub texture_hidden: usize,
    pub residual_hidden: usize,
    pub alpha_hidden: usize,
    /// Hidden layers per MLP (affine layers = hidden_layers + 1).
    pub hidden_layers: usize,
    pub texture_grid: HashGridSpec,
    pub residual_grid: HashGridSpec,
    pub foreground_layers: usize,
}

impl Default for NvdArch {
    fn default() -> Self {
        Self {
            mapping_hidden: 64,
            texture_hidden: 64,
            residual_hidden: 64,
            alpha_hidden: 64,
            hidden_layers: 3,
            texture_grid: HashGridSpec::texture_default(),
            residual_grid: HashGridSpec::residual_default(),
            foreground_layers: 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TensorRole {
    Weight { fan_in: usize },
    Bias { fan_in: usize },
    HashTable,
}

/// Name, shape and role of one model tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: TensorRole,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_hash_table(&self) -> bool {
        self.role == TensorRole::HashTable
    }
}

/// Which stack of modules a call refers to: layer 0 is the background,
/// layers `1..=foreground_layers` are foregrounds.
pub type LayerIndex = usize;

impl NvdArch {
    pub fn validate(&self) -> Result<()> {
        self.texture_grid.validate()?;
        self.residual_grid.validate()?;
        if self.texture_grid.input_dim != 2 || self.residual_grid.input_dim != 3 {
            return Err(Error::Config("texture grid must be 2D and residual grid 3D".into()));
        }
        if self.foreground_layers < 1 {
            return Err(Error::Config("at least one foreground layer is required".into()));
        }
        if self.hidden_layers < 1 {
            return Err(Error::Config("MLPs need at least one hidden layer".into()));
        }
        for (w, what) in [
            (self.mapping_hidden, "mapping"),
            (self.texture_hidden, "texture"),
            (self.residual_hidden, "residual"),
            (self.alpha_hidden, "alpha"),
        ] {
            if w == 0 {
                return Err(Error::Config(format!("{what} hidden width is zero")));
            }
        }
        Ok(())
    }

    pub fn layer_count(&self) -> usize {
        self.foreground_layers + 1
    }

    /// Name prefix of a layer: `bg`, then `fg` (single foreground) or
    /// `fg0`, `fg1`, ...
    pub fn layer_prefix(&self, layer: LayerIndex) -> String {
        match layer {
            0 => "bg".into(),
            _ if self.foreground_layers == 1 => "fg".into(),
            f => format!("fg{}", f - 1),
        }
    }

    fn mlp(&self, out: &mut Vec<TensorSpec>, prefix: &str, input: usize, hidden: usize, output: usize) {
        let mut fan_in = input;
        for i in 0..=self.hidden_layers {
            let width = if i == self.hidden_layers { output } else { hidden };
            out.push(TensorSpec {
                name: format!("{prefix}.fc{i}.weight"),
                shape: vec![fan_in, width],
                role: TensorRole::Weight { fan_in },
            });
            out.push(TensorSpec {
                name: format!("{prefix}.fc{i}.bias"),
                shape: vec![width],
                role: TensorRole::Bias { fan_in },
            });
            fan_in = width;
        }
    }

    fn grid(out: &mut Vec<TensorSpec>, prefix: &str, g: &HashGridSpec) {
        for l in 0..g.levels {
            out.push(TensorSpec {
                name: format!("{prefix}.grid.{l}"),
                shape: vec![g.table_size, g.feature_dim],
                role: TensorRole::HashTable,
            });
        }
    }

    /// Every tensor of the model, in canonical order.
    pub fn tensors(&self) -> Vec<TensorSpec> {
        let mut out = Vec::new();
        for layer in 0..self.layer_count() {
            let p = self.layer_prefix(layer);
            self.mlp(&mut out, &format!("{p}.mapping"), 3, self.mapping_hidden, 2);
            Self::grid(&mut out, &format!("{p}.texture"), &self.texture_grid);
            self.mlp(&mut out, &format!("{p}.texture"), self.texture_grid.output_dim(), self.texture_hidden, 3);
            Self::grid(&mut out, &format!("{p}.residual"), &self.residual_grid);
            self.mlp(&mut out, &format!("{p}.residual"), self.residual_grid.output_dim(), self.residual_hidden, 1);
        }
        self.mlp(&mut out, "alpha", 3, self.alpha_hidden, self.foreground_layers);
        out
    }

    /// Scalar parameter count, in closed form.
    pub fn param_count(&self) -> usize {
        let mlp = |input: usize, hidden: usize, output: usize| {
            let k = self.hidden_layers;
            (input + 1) * hidden + (k - 1) * (hidden + 1) * hidden + (hidden + 1) * output
        };
        let per_layer = mlp(3, self.mapping_hidden, 2)
            + self.texture_grid.param_count()
            + mlp(self.texture_grid.output_dim(), self.texture_hidden, 3)
            + self.residual_grid.param_count()
            + mlp(self.residual_grid.output_dim(), self.residual_hidden, 1);
        self.layer_count() * per_layer + mlp(3, self.alpha_hidden, self.foreground_layers)
    }
}

/// Standard random initialisation of one tensor: `U(-1/sqrt(fan_in),
/// 1/sqrt(fan_in))` for affine weights and biases, `U(-1e-4, 1e-4)` for hash
/// tables.
pub fn init_tensor<S: Real, R: Rng>(spec: &TensorSpec, rng: &mut R) -> Tensor<S> {
    let bound = match spec.role {
        TensorRole::Weight { fan_in } | TensorRole::Bias { fan_in } => 1.0 / (fan_in as f64).sqrt(),
        TensorRole::HashTable => 1e-4,
    };
    let data = (0..spec.len())
        .map(|_| S::from_f64_lossy(rng.random_range(-bound..bound)))
        .collect();
    Tensor::new(spec.shape.clone(), data).expect("spec shape")
}

/// Fresh, directly trainable parameters.
pub fn init_params<S: Real, R: Rng>(arch: &NvdArch, rng: &mut R) -> Result<ParamStore<S>> {
    arch.validate()?;
    let mut store = ParamStore::new();
    for spec in arch.tensors() {
        let t = init_tensor(&spec, rng);
        store.insert(spec.name, t, true)?;
    }
    Ok(store)
}

/// Affine layers of one MLP as tape variables.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub mapping: MlpVars,
    pub texture_grid: Vec<Var>,
    pub texture: MlpVars,
    pub residual_grid: Vec<Var>,
    pub residual: MlpVars,
}

/// A full parameter set bound to a tape, whatever produced it.
#[derive(Clone, Debug)]
pub struct NvdVars {
    pub layers: Vec<LayerVars>,
    pub alpha: MlpVars,
}

impl NvdVars {
    /// Binds variables given in the order of [`NvdArch::tensors`].
    pub fn from_ordered(arch: &NvdArch, vars: &[Var]) -> Result<Self> {
        let expected = arch.tensors().len();
        if vars.len() != expected {
            return Err(Error::invalid(format!(
                "parameter set has {} tensors, architecture declares {expected}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mlp = |it: &mut dyn Iterator<Item = Var>| MlpVars {
            layers: (0..=arch.hidden_layers)
                .map(|_| (it.next().unwrap(), it.next().unwrap()))
                .collect(),
        };
        let mut layers = Vec::new();
        for _ in 0..arch.layer_count() {
            let mapping = mlp(&mut it);
            let texture_grid = (&mut it).take(arch.texture_grid.levels).collect();
            let texture = mlp(&mut it);
            let residual_grid = (&mut it).take(arch.residual_grid.levels).collect();
            let residual = mlp(&mut it);
            layers.push(LayerVars {
                mapping,
                texture_grid,
                texture,
                residual_grid,
                residual,
            });
        }
        let alpha = mlp(&mut it);
        Ok(Self { layers, alpha })
    }

    /// Binds the parameters of a store by name.
    pub fn from_store<S: Real>(tape: &mut Tape<'_, S>, store: &ParamStore<S>, arch: &NvdArch) -> Result<Self> {
        let specs = arch.tensors();
        let mut missing = Vec::new();
        let mut vars = Vec::with_capacity(specs.len());
        for spec in &specs {
            match store.id(&spec.name) {
                Some(id) if store.value(id).shape() == spec.shape.as_slice() => vars.push(tape.param(id)),
                Some(id) => {
                    return Err(Error::ShapeMismatch {
                        op: "bind parameters",
                        lhs: spec.shape.clone(),
                        rhs: store.value(id).shape().to_vec(),
                    })
                }
                None => missing.push(spec.name.clone()),
            }
        }
        if !missing.is_empty() {
            return Err(Error::ParamMismatch {
                missing,
                extra: Vec::new(),
            });
        }
        Self::from_ordered(arch, &vars)
    }
}

fn mlp_forward<S: Real>(tape: &mut Tape<'_, S>, mlp: &MlpVars, x: Var) -> Result<Var> {
    let mut h = x;
    let last = mlp.layers.len() - 1;
    for (i, &(w, b)) in mlp.layers.iter().enumerate() {
        h = tape.affine(h, w, Some(b))?;
        if i < last {
            h = tape.relu(h)?;
        }
    }
    Ok(h)
}

fn check_coords<S: Real>(tape: &Tape<'_, S>, coords: Var, width: usize) -> Result<()> {
    let shape = tape.shape(coords);
    if shape.len() != 2 || shape[1] != width {
        return Err(Error::ShapeMismatch {
            op: "model input",
            lhs: vec![shape.first().copied().unwrap_or(0), width],
            rhs: shape.to_vec(),
        });
    }
    Ok(())
}

/// Texture coordinates `tanh(M(p))` of one layer, `[n, 3] -> [n, 2]`.
pub fn map_points<S: Real>(tape: &mut Tape<'_, S>, params: &NvdVars, layer: LayerIndex, coords: Var) -> Result<Var> {
    check_coords(tape, coords, 3)?;
    let h = mlp_forward(tape, &params.layers[layer].mapping, coords)?;
    tape.tanh(h)
}

/// Canonical colour `(tanh(T(uv)) + 1) / 2` of one layer, `[n, 2] -> [n, 3]`.
pub fn texture_color<S: Real>(
    tape: &mut Tape<'_, S>,
    arch: &NvdArch,
    params: &NvdVars,
    layer: LayerIndex,
    uv: Var,
) -> Result<Var> {
    check_coords(tape, uv, 2)?;
    let half = cst::<S>(0.5);
    let unit = tape.scale_shift(uv, half, half)?;
    let lp = &params.layers[layer];
    let feats = encode(tape, &arch.texture_grid, &lp.texture_grid, unit)?;
    let h = mlp_forward(tape, &lp.texture, feats)?;
    let t = tape.tanh(h)?;
    tape.scale_shift(t, half, half)
}

/// Multiplicative residual `1 + tanh(R(p))` of one layer, `[n, 3] -> [n, 1]`.
pub fn residual_coeff<S: Real>(
    tape: &mut Tape<'_, S>,
    arch: &NvdArch,
    params: &NvdVars,
    layer: LayerIndex,
    coords: Var,
) -> Result<Var> {
    check_coords(tape, coords, 3)?;
    let half = cst::<S>(0.5);
    let unit = tape.scale_shift(coords, half, half)?;
    let lp = &params.layers[layer];
    let feats = encode(tape, &arch.residual_grid, &lp.residual_grid, unit)?;
    let h = mlp_forward(tape, &lp.residual, feats)?;
    let t = tape.tanh(h)?;
    tape.scale_shift(t, S::one(), S::one())
}

/// Foreground opacities `sigmoid(A(p))`, `[n, 3] -> [n, N_f]`.
pub fn alpha_value<S: Real>(tape: &mut Tape<'_, S>, params: &NvdVars, coords: Var) -> Result<Var> {
    check_coords(tape, coords, 3)?;
    let h = mlp_forward(tape, &params.alpha, coords)?;
    tape.sigmoid(h)
}

/// Back-to-front compositing `c <- (1 - a_f) c + a_f c_f` over the
/// foreground layers, starting from the background colour.
pub fn compose<S: Real>(tape: &mut Tape<'_, S>, layer_colors: &[Var], alpha: Var) -> Result<Var> {
    let mut out = layer_colors[0];
    for (f, &c) in layer_colors.iter().enumerate().skip(1) {
        // (1 - a) out + a c rather than out + a (c - out): exact at a = 0 and a = 1.
        let a = tape.slice_cols(alpha, f - 1, 1)?;
        let keep = tape.scale_shift(a, -S::one(), S::one())?;
        let under = tape.mul_col(out, keep)?;
        let over = tape.mul_col(c, a)?;
        out = tape.add(under, over)?;
    }
    Ok(out)
}

/// Reconstruction of a batch of points together with the intermediate
/// quantities the losses consume.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    /// Composited colour `[n, 3]`, unclamped.
    pub color: Var,
    /// Per layer texture coordinates `[n, 2]`.
    pub uv: Vec<Var>,
    /// Per layer canonical colour before the residual `[n, 3]`.
    pub texture: Vec<Var>,
    /// Per layer residual coefficient `[n, 1]`.
    pub residual: Vec<Var>,
    /// Foreground opacities `[n, N_f]`.
    pub alpha: Var,
}

pub fn reconstruct_points<S: Real>(
    tape: &mut Tape<'_, S>,
    arch: &NvdArch,
    params: &NvdVars,
    coords: Var,
) -> Result<Reconstruction> {
    let mut uv = Vec::new();
    let mut texture = Vec::new();
    let mut residual = Vec::new();
    let mut lit = Vec::new();
    for layer in 0..arch.layer_count() {
        let m = map_points(tape, params, layer, coords)?;
        let c = texture_color(tape, arch, params, layer, m)?;
        let r = residual_coeff(tape, arch, params, layer, coords)?;
        lit.push(tape.mul_col(c, r)?);
        uv.push(m);
        texture.push(c);
        residual.push(r);
    }
    let alpha = alpha_value(tape, params, coords)?;
    let color = compose(tape, &lit, alpha)?;
    Ok(Reconstruction {
        color,
        uv,
        texture,
        residual,
        alpha,
    })
}

/// Normalised coordinate of pixel `(row, col)` in frame `frame`.
pub fn normalize_coord(frame: usize, row: usize, col: usize, frames: usize, height: usize, width: usize) -> [f64; 3] {
    let norm = |i: usize, n: usize| if n > 1 { 2.0 * i as f64 / (n - 1) as f64 - 1.0 } else { 0.0 };
    [norm(col, width), norm(row, height), norm(frame, frames)]
}

/// Per-pixel outputs of a model over whole frames.
#[derive(Clone, Debug)]
pub struct DenseOutputs {
    /// `[F, H, W, 3]`, clamped to `[0, 1]`.
    pub color: Tensor<f64>,
    /// `[F, H, W, N_f]`.
    pub alpha: Tensor<f64>,
    /// `[layers, F, H, W]`.
    pub residual: Tensor<f64>,
    /// `[layers, F, H, W, 2]`.
    pub uv: Tensor<f64>,
}

/// Evaluates the model at every pixel of an `frames x height x width` video,
/// in chunks of `chunk` points.
pub fn render_video<S: Real>(
    arch: &NvdArch,
    store: &ParamStore<S>,
    frames: usize,
    height: usize,
    width: usize,
    chunk: usize,
) -> Result<DenseOutputs> {
    let total = frames * height * width;
    let layers = arch.layer_count();
    let nf = arch.foreground_layers;
    let mut color = Vec::with_capacity(total * 3);
    let mut alpha = Vec::with_capacity(total * nf);
    let mut residual = vec![0.0; layers * total];
    let mut uv = vec![0.0; layers * total * 2];
    let mut start = 0;
    while start < total {
        let end = (start + chunk.max(1)).min(total);
        let mut coords = Vec::with_capacity((end - start) * 3);
        for k in start..end {
            let (f, rest) = (k / (height * width), k % (height * width));
            let c = normalize_coord(f, rest / width, rest % width, frames, height, width);
            coords.extend(c.iter().map(|&x| S::from_f64_lossy(x)));
        }
        let mut tape = Tape::new(store.view());
        let vars = NvdVars::from_store(&mut tape, store, arch)?;
        let p = tape.constant(Tensor::new([end - start, 3], coords)?)?;
        let rec = reconstruct_points(&mut tape, arch, &vars, p)?;
        color.extend(tape.value(rec.color).data().iter().map(|x| x.to_f64_lossy().clamp(0.0, 1.0)));
        alpha.extend(tape.value(rec.alpha).to_f64_vec());
        for l in 0..layers {
            for (k, &r) in tape.value(rec.residual[l]).data().iter().enumerate() {
                residual[l * total + start + k] = r.to_f64_lossy();
            }
            for (k, &u) in tape.value(rec.uv[l]).data().iter().enumerate() {
                uv[(l * total + start) * 2 + k] = u.to_f64_lossy();
            }
        }
        start = end;
    }
    Ok(DenseOutputs {
        color: Tensor::new([frames, height, width, 3], color)?,
        alpha: Tensor::new([frames, height, width, nf], alpha)?,
        residual: Tensor::new([layers, frames, height, width], residual)?,
        uv: Tensor::new([layers, frames, height, width, 2], uv)?,
    })
}
