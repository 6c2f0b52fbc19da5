//! Embedding-conditioned generation of every model tensor, plus the
//! embedding compressor and the deterministic descriptor embedding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::VideoDataset;
use crate::diffcore::{Adam, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{init_tensor, NvdArch, TensorRole, TensorSpec};

pub const EMBED_DIM: usize = 768;

/// Layout revision of [`descriptor_embedding`].
pub const DESCRIPTOR_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingSource {
    File,
    Descriptor,
    Learnable,
}

/// Whether hash tables are emitted per video or shared as direct parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MrheMode {
    Hyper,
    Universal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperConfig {
    pub hidden: usize,
    pub hidden_layers: usize,
    /// Scale of the output-layer weight initialisation relative to the
    /// usual `1/sqrt(fan_in)` bound.
    pub output_scale: f64,
}

impl Default for HyperConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            hidden_layers: 2,
            output_scale: 1e-2,
        }
    }
}

#[derive(Clone, Debug)]
enum Source {
    Head(Vec<(ParamId, ParamId)>),
    Direct(ParamId),
}

/// Parameter layout of a hypernetwork inside a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct HyperNet {
    arch: NvdArch,
    config: HyperConfig,
    mode: MrheMode,
    targets: Vec<TensorSpec>,
    sources: Vec<Source>,
}

fn head_prefix(target: &str) -> String {
    format!("head.{target}")
}

fn universal_name(target: &str) -> String {
    format!("universal.{target}")
}

impl HyperNet {
    /// Inserts freshly initialised hypernetwork parameters into `store`.
    ///
    /// Hidden layers get the usual uniform initialisation with zero biases;
    /// output weights are shrunk by `output_scale` and output biases start
    /// at a standard random initialisation of the target tensor, so the
    /// emitted model begins close to a conventional random model.
    pub fn build<S: Real, R: Rng>(
        arch: &NvdArch,
        config: &HyperConfig,
        mode: MrheMode,
        store: &mut ParamStore<S>,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        if config.hidden == 0 || config.hidden_layers == 0 {
            return Err(Error::Config("hypernet needs at least one non-empty hidden layer".into()));
        }
        let targets = arch.tensors();
        let mut sources = Vec::with_capacity(targets.len());
        for t in &targets {
            if mode == MrheMode::Universal && t.is_hash_table() {
                let id = store.insert(universal_name(&t.name), init_tensor(t, rng), true)?;
                sources.push(Source::Direct(id));
                continue;
            }
            let prefix = head_prefix(&t.name);
            let mut layers = Vec::new();
            let mut fan_in = EMBED_DIM;
            for i in 0..=config.hidden_layers {
                let last = i == config.hidden_layers;
                let width = if last { t.len() } else { config.hidden };
                let bound = if last { config.output_scale } else { 1.0 } / (fan_in as f64).sqrt();
                let w = uniform(rng, vec![fan_in, width], bound);
                let b = if last {
                    init_tensor::<S, R>(t, rng).reshape(vec![width])?
                } else {
                    Tensor::zeros([width])
                };
                let wid = store.insert(format!("{prefix}.fc{i}.weight"), w, true)?;
                let bid = store.insert(format!("{prefix}.fc{i}.bias"), b, true)?;
                layers.push((wid, bid));
                fan_in = width;
            }
            sources.push(Source::Head(layers));
        }
        Ok(Self {
            arch: arch.clone(),
            config: config.clone(),
            mode,
            targets,
            sources,
        })
    }

    /// Recovers the layout of a hypernetwork already present in `store`.
    pub fn attach<S: Real>(arch: &NvdArch, config: &HyperConfig, mode: MrheMode, store: &ParamStore<S>) -> Result<Self> {
        let targets = arch.tensors();
        let mut sources = Vec::with_capacity(targets.len());
        let mut missing = Vec::new();
        for t in &targets {
            if mode == MrheMode::Universal && t.is_hash_table() {
                match store.id(&universal_name(&t.name)) {
                    Some(id) => sources.push(Source::Direct(id)),
                    None => missing.push(universal_name(&t.name)),
                }
                continue;
            }
            let prefix = head_prefix(&t.name);
            let mut layers = Vec::new();
            for i in 0..=config.hidden_layers {
                let (wn, bn) = (format!("{prefix}.fc{i}.weight"), format!("{prefix}.fc{i}.bias"));
                match (store.id(&wn), store.id(&bn)) {
                    (Some(w), Some(b)) => layers.push((w, b)),
                    (w, b) => {
                        if w.is_none() {
                            missing.push(wn);
                        }
                        if b.is_none() {
                            missing.push(bn);
                        }
                    }
                }
            }
            sources.push(Source::Head(layers));
        }
        let known: std::collections::HashSet<String> = targets
            .iter()
            .flat_map(|t| {
                if mode == MrheMode::Universal && t.is_hash_table() {
                    return vec![universal_name(&t.name)];
                }
                let p = head_prefix(&t.name);
                (0..=config.hidden_layers)
                    .flat_map(|i| [format!("{p}.fc{i}.weight"), format!("{p}.fc{i}.bias")])
                    .collect()
            })
            .collect();
        let extra: Vec<String> = store
            .iter()
            .map(|(_, n)| n.name.to_string())
            .filter(|n| (n.starts_with("head.") || n.starts_with("universal.")) && !known.contains(n))
            .collect();
        if !missing.is_empty() || !extra.is_empty() {
            return Err(Error::ParamMismatch { missing, extra });
        }
        Ok(Self {
            arch: arch.clone(),
            config: config.clone(),
            mode,
            targets,
            sources,
        })
    }

    pub fn arch(&self) -> &NvdArch {
        &self.arch
    }

    pub fn config(&self) -> &HyperConfig {
        &self.config
    }

    pub fn mode(&self) -> MrheMode {
        self.mode
    }

    /// Number of generating heads (one per emitted tensor).
    pub fn head_count(&self) -> usize {
        self.sources.iter().filter(|s| matches!(s, Source::Head(_))).count()
    }

    /// Parameters of the head emitting `target`, if it is head-generated.
    pub fn head_params(&self, target: &str) -> Option<Vec<ParamId>> {
        let i = self.targets.iter().position(|t| t.name == target)?;
        match &self.sources[i] {
            Source::Head(layers) => Some(layers.iter().flat_map(|&(w, b)| [w, b]).collect()),
            Source::Direct(_) => None,
        }
    }

    /// True for hypernetwork parameters that produce (or are) hash tables.
    pub fn is_hash_param(name: &str) -> bool {
        name.starts_with("universal.") || (name.starts_with("head.") && name.contains(".grid."))
    }

    /// Emits every model tensor on `tape` from the embedding `e: [1, 768]`,
    /// in the order of [`NvdArch::tensors`].
    pub fn generate<S: Real>(&self, tape: &mut Tape<'_, S>, e: Var) -> Result<Vec<Var>> {
        let shape = tape.shape(e);
        if shape.iter().product::<usize>() != EMBED_DIM {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                lhs: vec![1, EMBED_DIM],
                rhs: shape.to_vec(),
            });
        }
        let e = tape.reshape(e, &[1, EMBED_DIM])?;
        let mut out = Vec::with_capacity(self.targets.len());
        for (t, src) in self.targets.iter().zip(&self.sources) {
            match src {
                Source::Direct(id) => out.push(tape.param(*id)),
                Source::Head(layers) => {
                    let mut h = e;
                    for (i, &(w, b)) in layers.iter().enumerate() {
                        let (w, b) = (tape.param(w), tape.param(b));
                        h = tape.affine(h, w, Some(b))?;
                        if i + 1 < layers.len() {
                            h = tape.relu(h)?;
                        }
                    }
                    out.push(tape.reshape(h, &t.shape)?);
                }
            }
        }
        Ok(out)
    }

    /// Emits a standalone, directly trainable parameter set.
    pub fn generate_store<S: Real>(&self, store: &ParamStore<S>, embedding: &Tensor<S>) -> Result<ParamStore<S>> {
        let mut tape = Tape::new(store.view());
        let e = tape.constant(embedding.clone())?;
        let vars = self.generate(&mut tape, e)?;
        let mut out = ParamStore::new();
        for (t, v) in self.targets.iter().zip(vars) {
            out.insert(t.name.clone(), tape.value(v).clone(), true)?;
        }
        Ok(out)
    }
}

fn uniform<S: Real, R: Rng>(rng: &mut R, shape: Vec<usize>, bound: f64) -> Tensor<S> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| S::from_f64_lossy(rng.random_range(-bound..bound))).collect();
    Tensor::new(shape, data).expect("shape")
}

/// Per-role counts used in reports.
pub fn role_name(role: TensorRole) -> &'static str {
    match role {
        TensorRole::Weight { .. } => "weight",
        TensorRole::Bias { .. } => "bias",
        TensorRole::HashTable => "hash",
    }
}

/// Checks an embedding's length and finiteness.
pub fn validate_embedding<S: Real>(e: &Tensor<S>) -> Result<()> {
    if e.len() != EMBED_DIM {
        return Err(Error::invalid(format!("embedding has {} entries, expected {EMBED_DIM}", e.len())));
    }
    if !e.all_finite() {
        return Err(Error::NonFinite("embedding".into()));
    }
    Ok(())
}

/// Deterministic 768-entry descriptor of a video: for 8 evenly spaced
/// frames, an 8x8 block-mean luminance grid (mean removed) and per-channel
/// means and standard deviations; for each consecutive pair of those frames,
/// a 4x4 grid of mean absolute luminance change and the signed per-channel
/// mean change. Zero-padded and scaled to unit norm.
pub fn descriptor_embedding(ds: &VideoDataset) -> Result<Tensor<f64>> {
    let (f, h, w) = (ds.frame_count(), ds.height(), ds.width());
    if f == 0 {
        return Err(Error::Dataset("descriptor of an empty video".into()));
    }
    let picks: Vec<usize> = (0..8)
        .map(|i| if f == 1 { 0 } else { ((i * (f - 1)) as f64 / 7.0).round() as usize })
        .collect();
    let luma = |t: usize, r: usize, c: usize| {
        let [cr, cg, cb] = ds.color(t, r, c);
        0.299 * cr as f64 + 0.587 * cg as f64 + 0.114 * cb as f64
    };
    let block_mean = |t: usize, g: usize, bi: usize, bj: usize, f: &dyn Fn(usize, usize, usize) -> f64| {
        let (r0, r1) = (bi * h / g, ((bi + 1) * h / g).max(bi * h / g + 1));
        let (c0, c1) = (bj * w / g, ((bj + 1) * w / g).max(bj * w / g + 1));
        let mut s = 0.0;
        for r in r0..r1.min(h) {
            for c in c0..c1.min(w) {
                s += f(t, r, c);
            }
        }
        s / ((r1.min(h) - r0) * (c1.min(w) - c0)) as f64
    };
    let mut out = Vec::with_capacity(EMBED_DIM);
    for &t in &picks {
        let grid: Vec<f64> = (0..64).map(|k| block_mean(t, 8, k / 8, k % 8, &luma)).collect();
        let m = grid.iter().sum::<f64>() / 64.0;
        out.extend(grid.iter().map(|x| x - m));
        for ch in 0..3 {
            let vals: Vec<f64> = (0..h * w).map(|i| ds.color(t, i / w, i % w)[ch] as f64).collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            out.push(mean);
            out.push(var.sqrt());
        }
    }
    for pair in picks.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let diff = |_: usize, r: usize, c: usize| (luma(b, r, c) - luma(a, r, c)).abs();
        out.extend((0..16).map(|k| block_mean(0, 4, k / 4, k % 4, &diff)));
        for ch in 0..3 {
            let d: f64 = (0..h * w)
                .map(|i| ds.color(b, i / w, i % w)[ch] as f64 - ds.color(a, i / w, i % w)[ch] as f64)
                .sum::<f64>()
                / (h * w) as f64;
            out.push(d);
        }
    }
    out.resize(EMBED_DIM, 0.0);
    let norm = out.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        out.iter_mut().for_each(|x| *x /= norm);
    } else {
        out[0] = 1.0;
    }
    Tensor::new([1, EMBED_DIM], out)
}

/// Outcome of [`compress_embedding`].
#[derive(Clone, Debug)]
pub struct Compressed {
    /// `[768]`.
    pub embedding: Tensor<f64>,
    pub initial_l1: f64,
    pub final_l1: f64,
    /// Encoder weight `[P, 1]`, bias `[1]`, decoder weight `[1, P]`, bias `[P]`.
    pub autoencoder: ParamStore<f64>,
}

/// Compresses a `[768, P]` feature matrix to 768 values with a linear
/// autoencoder over the patch axis (encoder `P -> 1`, decoder `1 -> P`,
/// applied to every feature row), trained on mean absolute reconstruction
/// error. The learning rate decays geometrically to 1% over the run.
pub fn compress_embedding<R: Rng>(features: &Tensor<f64>, steps: usize, lr: f64, rng: &mut R) -> Result<Compressed> {
    let shape = features.shape();
    if shape.len() != 2 || shape[0] != EMBED_DIM || shape[1] == 0 {
        return Err(Error::ShapeMismatch {
            op: "compress_embedding",
            lhs: vec![EMBED_DIM, 0],
            rhs: shape.to_vec(),
        });
    }
    if !features.all_finite() {
        return Err(Error::NonFinite("feature matrix".into()));
    }
    let p = shape[1];
    let mut store = ParamStore::new();
    let b_in = 1.0 / (p as f64).sqrt();
    let enc_w = store.insert("encoder.weight", uniform(rng, vec![p, 1], b_in), true)?;
    let enc_b = store.insert("encoder.bias", uniform(rng, vec![1], b_in), true)?;
    let dec_w = store.insert("decoder.weight", uniform(rng, vec![1, p], 1.0), true)?;
    let dec_b = store.insert("decoder.bias", uniform(rng, vec![p], 1.0), true)?;
    let mut adam = Adam::with_uniform_lr(&store, lr)?;
    let decay = if steps > 1 { (0.01f64).ln() / (steps - 1) as f64 } else { 0.0 };
    let forward = |tape: &mut Tape<'_, f64>| -> Result<(Var, Var)> {
        let x = tape.constant(features.clone())?;
        let (ew, eb, dw, db) = (tape.param(enc_w), tape.param(enc_b), tape.param(dec_w), tape.param(dec_b));
        let z = tape.affine(x, ew, Some(eb))?;
        let y = tape.affine(z, dw, Some(db))?;
        let d = tape.sub(y, x)?;
        let d = tape.abs(d)?;
        Ok((z, tape.mean(d)?))
    };
    let mut initial = None;
    for step in 0..steps {
        store.zero_grads();
        let (view, mut sink) = store.split();
        let mut tape = Tape::new(view);
        let (_, loss) = forward(&mut tape)?;
        let l = tape.value(loss).item();
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("compression loss at step {step}")));
        }
        initial.get_or_insert(l);
        tape.backward(loss, &mut sink)?;
        drop(tape);
        for id in [enc_w, enc_b, dec_w, dec_b] {
            adam.set_lr(id, lr * (decay * step as f64).exp())?;
        }
        adam.step(&mut store)?;
    }
    let mut tape = Tape::new(store.view());
    let (z, loss) = forward(&mut tape)?;
    let final_l1 = tape.value(loss).item();
    let embedding = tape.value(z).clone().reshape(vec![EMBED_DIM])?;
    drop(tape);
    Ok(Compressed {
        embedding,
        initial_l1: initial.unwrap_or(final_l1),
        final_l1,
        autoencoder: store,
    })
}
