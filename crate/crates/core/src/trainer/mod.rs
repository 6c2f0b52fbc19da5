//! Mapping pre-training, hypernetwork training over one or more videos,
//! direct fine-tuning, evaluation and checkpoints.

mod checkpoint;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

pub use checkpoint::{config_digest, file_digest, Checkpoint, CheckpointHeader, CheckpointMode, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::dataio::{embedding_path, iteration_rng, load_tensor, load_video_dataset, sample_point_batch, PointBatch, VideoDataset};
use crate::diffcore::{Adam, ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::hypernet::{descriptor_embedding, validate_embedding, EmbeddingSource, HyperConfig, HyperNet, MrheMode};
use crate::losses::{total_loss, LossInputs, LossReport, LossWeights};
use crate::metrics::{psnr, video_ssim};
use crate::model::{alpha_value, init_params, map_points, reconstruct_points, render_video, residual_coeff, NvdArch, NvdVars};

/// Stream offset separating pre-training batches from training batches.
const PRETRAIN_STREAM: u64 = 1 << 63;

/// Target scale of the mapping pre-training.
pub const PRETRAIN_SCALE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: u64,
    pub pretrain_iterations: u64,
    /// Anchor points per batch.
    pub batch_size: usize,
    /// Residual patches per batch.
    pub patches: usize,
    pub lr_hash: f64,
    pub lr_other: f64,
    pub seed: u64,
    pub losses: LossWeights,
    /// Rescale the rigidity and bootstrap cut-offs to `iterations`.
    pub scale_schedules: bool,
    /// Fine-tuning restarts the rigidity and bootstrap schedules.
    pub restart_schedules: bool,
    pub videos: Vec<PathBuf>,
    pub embedding: EmbeddingSource,
    /// Directory holding `<id>.emb.nvdt`; defaults to each video directory.
    pub embedding_dir: Option<PathBuf>,
    pub mrhe: MrheMode,
    pub arch: NvdArch,
    pub hyper: HyperConfig,
    pub log_interval: u64,
    pub eval_interval: u64,
    pub checkpoint_interval: u64,
    pub divergence_limit: f64,
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            pretrain_iterations: 100,
            batch_size: 8192,
            patches: 64,
            lr_hash: 1e-2,
            lr_other: 5e-4,
            seed: 0,
            losses: LossWeights::default(),
            scale_schedules: true,
            restart_schedules: true,
            videos: Vec::new(),
            embedding: EmbeddingSource::Descriptor,
            embedding_dir: None,
            mrhe: MrheMode::Hyper,
            arch: NvdArch::default(),
            hyper: HyperConfig::default(),
            log_interval: 100,
            eval_interval: 1000,
            checkpoint_interval: 0,
            divergence_limit: 1e6,
            eval_chunk: 4096,
        }
    }
}

impl TrainConfig {
    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [("lr_hash", self.lr_hash), ("lr_other", self.lr_other)] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.videos.is_empty() {
            return Err(Error::Config("video list is empty".into()));
        }
        if !(self.divergence_limit > 0.0) {
            return Err(Error::Config("divergence_limit must be positive".into()));
        }
        self.losses.validate()?;
        self.arch.validate()
    }

    /// Loss weights with the schedules this run uses.
    pub fn effective_losses(&self) -> LossWeights {
        if self.scale_schedules {
            self.losses.clone().scaled_to(self.iterations)
        } else {
            self.losses.clone()
        }
    }

    pub fn load_videos(&self) -> Result<Vec<VideoDataset>> {
        let sets = self
            .videos
            .iter()
            .map(|d| load_video_dataset(d, self.losses.flow_threshold))
            .collect::<Result<Vec<_>>>()?;
        for (i, a) in sets.iter().enumerate() {
            if sets[..i].iter().any(|b| b.id == a.id) {
                return Err(Error::Config(format!("duplicate video id `{}`", a.id)));
            }
        }
        Ok(sets)
    }

    /// Embedding of `ds` under a non-learnable source. Learnable embeddings
    /// start from the descriptor.
    pub fn resolve_embedding(&self, ds: &VideoDataset, video_dir: Option<&Path>) -> Result<Tensor<f64>> {
        match self.embedding {
            EmbeddingSource::File => {
                let dir = self
                    .embedding_dir
                    .as_deref()
                    .or(video_dir)
                    .ok_or_else(|| Error::Config("file embeddings need an embedding directory".into()))?;
                let e = load_tensor::<f64>(embedding_path(dir, &ds.id))?.reshape(vec![1, crate::hypernet::EMBED_DIM]);
                let e = e.map_err(|_| Error::invalid(format!("embedding of `{}` must have 768 entries", ds.id)))?;
                validate_embedding(&e)?;
                Ok(e)
            }
            EmbeddingSource::Descriptor | EmbeddingSource::Learnable => descriptor_embedding(ds),
        }
    }
}

/// Learning rate group of a parameter name.
pub fn is_hash_group(name: &str) -> bool {
    HyperNet::is_hash_param(name) || (!name.starts_with("head.") && name.contains(".grid."))
}

/// Per-video quality at an evaluation point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub iteration: u64,
    pub video: String,
    pub psnr: f64,
    pub ssim: f64,
    /// Mean `|alpha - mask|` over all pixels (largest opacity when there are
    /// several foreground layers).
    pub alpha_error: f64,
}

#[derive(Clone, Debug)]
enum EmbedSlot<S> {
    Fixed(Tensor<S>),
    Learnable(ParamId),
}

#[derive(Clone, Debug)]
enum Engine<S> {
    Meta { hyper: HyperNet, embeds: Vec<EmbedSlot<S>> },
    Direct { ids: Vec<ParamId> },
}

/// Training state for either the hypernetwork (meta) or a single model
/// (direct).
pub struct Trainer<S: Real> {
    config: TrainConfig,
    weights: LossWeights,
    datasets: Vec<VideoDataset>,
    store: ParamStore<S>,
    adam: Adam<S>,
    engine: Engine<S>,
    iteration: u64,
    pretrained: bool,
    history: Vec<EvalRecord>,
    log: Option<Box<dyn Write>>,
    started: Instant,
}

fn routed_adam<S: Real>(store: &ParamStore<S>, config: &TrainConfig) -> Result<Adam<S>> {
    Adam::new(store, |_, name| if is_hash_group(name) { config.lr_hash } else { config.lr_other })
}

fn direct_ids<S: Real>(store: &ParamStore<S>, arch: &NvdArch) -> Result<Vec<ParamId>> {
    let specs = arch.tensors();
    let missing: Vec<String> = specs.iter().filter(|t| store.id(&t.name).is_none()).map(|t| t.name.clone()).collect();
    let extra: Vec<String> = store
        .iter()
        .map(|(_, n)| n.name.to_string())
        .filter(|n| !specs.iter().any(|t| &t.name == n))
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::ParamMismatch { missing, extra });
    }
    for t in &specs {
        let id = store.id(&t.name).expect("checked");
        if store.value(id).shape() != t.shape.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "model tensor",
                lhs: t.shape.clone(),
                rhs: store.value(id).shape().to_vec(),
            });
        }
    }
    Ok(specs.iter().map(|t| store.id(&t.name).expect("checked")).collect())
}

fn learnable_name(id: &str) -> String {
    format!("embedding.{id}")
}

/// Builds the loss graph of one batch for the model `vars`.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss<S: Real>(
    tape: &mut Tape<'_, S>,
    arch: &NvdArch,
    vars: &NvdVars,
    batch: &PointBatch<S>,
    width: usize,
    height: usize,
    weights: &LossWeights,
    iteration: u64,
) -> Result<(Var, LossReport)> {
    let coords = tape.constant(batch.coords.clone())?;
    let rec = reconstruct_points(tape, arch, vars, coords)?;
    let gt_color = tape.constant(batch.color.clone())?;
    let mask = tape.constant(batch.mask.clone())?;
    let q = tape.constant(batch.flow_coords.clone())?;
    let mut flow_uv = Vec::new();
    for l in 0..arch.layer_count() {
        flow_uv.push(map_points(tape, vars, l, q)?);
    }
    let flow_alpha = alpha_value(tape, vars, q)?;
    let p1 = tape.constant(batch.patch_t1.clone())?;
    let p2 = tape.constant(batch.patch_t2.clone())?;
    let mut patches = Vec::new();
    for l in 0..arch.layer_count() {
        patches.push((residual_coeff(tape, arch, vars, l, p1)?, residual_coeff(tape, arch, vars, l, p2)?));
    }
    total_loss(
        tape,
        weights,
        iteration,
        &LossInputs {
            rec: &rec,
            gt_color,
            mask,
            grad_valid: &batch.grad_valid,
            flow_uv: &flow_uv,
            flow_alpha,
            flow_gate: &batch.flow_gate,
            patches: &patches,
            width,
            height,
        },
    )
}

/// Uniform random coordinates in `[-1, 1]^3`.
fn random_coords<S: Real>(n: usize, rng: &mut impl Rng) -> Result<Tensor<S>> {
    let data = (0..n * 3).map(|_| S::from_f64_lossy(rng.random_range(-1.0..=1.0))).collect();
    Tensor::new([n, 3], data)
}

/// Mean squared distance of every layer's mapping from the scaled
/// identity, summed over layers.
fn pretrain_objective<S: Real>(tape: &mut Tape<'_, S>, arch: &NvdArch, vars: &NvdVars, coords: &Tensor<S>) -> Result<Var> {
    let n = coords.rows();
    let target: Vec<S> = coords
        .data()
        .chunks_exact(3)
        .flat_map(|c| [c[0] * crate::diffcore::cst(PRETRAIN_SCALE), c[1] * crate::diffcore::cst(PRETRAIN_SCALE)])
        .collect();
    let target = tape.constant(Tensor::new([n, 2], target)?)?;
    let p = tape.constant(coords.clone())?;
    let mut terms = Vec::new();
    for l in 0..arch.layer_count() {
        let m = map_points(tape, vars, l, p)?;
        let d = tape.sub(m, target)?;
        let d = tape.square(d)?;
        let d = tape.row_sum(d)?;
        terms.push((tape.mean(d)?, S::one()));
    }
    tape.combine(&terms)
}

impl<S: Real> Trainer<S> {
    /// Fresh hypernetwork training over `datasets` (in `config.videos` order).
    pub fn new_meta(config: TrainConfig, datasets: Vec<VideoDataset>) -> Result<Self> {
        config.validate()?;
        if datasets.is_empty() {
            return Err(Error::Config("no videos to train on".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let hyper = HyperNet::build(&config.arch, &config.hyper, config.mrhe, &mut store, &mut rng)?;
        let mut embeds = Vec::new();
        for (i, ds) in datasets.iter().enumerate() {
            let e = config.resolve_embedding(ds, config.videos.get(i).map(PathBuf::as_path))?;
            embeds.push(match config.embedding {
                EmbeddingSource::Learnable => EmbedSlot::Learnable(store.insert(learnable_name(&ds.id), e.cast(), true)?),
                _ => EmbedSlot::Fixed(e.cast()),
            });
        }
        let adam = routed_adam(&store, &config)?;
        Ok(Self::assemble(config, datasets, store, adam, Engine::Meta { hyper, embeds }, 0, false))
    }

    /// Direct training of `params` (a model parameter set) on one video.
    pub fn new_direct(config: TrainConfig, dataset: VideoDataset, params: ParamStore<S>, pretrained: bool) -> Result<Self> {
        config.validate()?;
        let ids = direct_ids(&params, &config.arch)?;
        let adam = routed_adam(&params, &config)?;
        Ok(Self::assemble(config, vec![dataset], params, adam, Engine::Direct { ids }, 0, pretrained))
    }

    /// Direct training from a random initialisation.
    pub fn new_scratch(config: TrainConfig, dataset: VideoDataset) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let params = init_params(&config.arch, &mut rng)?;
        Self::new_direct(config, dataset, params, false)
    }

    /// Direct training initialised by a metamodel's output for `dataset`.
    /// The metamodel itself is left untouched.
    pub fn new_finetune(meta: &Checkpoint<S>, mut config: TrainConfig, dataset: VideoDataset, video_dir: Option<&Path>) -> Result<Self> {
        if meta.header.mode != CheckpointMode::Meta {
            return Err(Error::Checkpoint("fine-tuning needs a meta checkpoint".into()));
        }
        if meta.header.arch != config.arch {
            return Err(Error::Config("model architecture differs from the metamodel's".into()));
        }
        if !config.restart_schedules {
            config.losses.rigid_until = 0;
            config.losses.bootstrap_until = 0;
            config.scale_schedules = false;
        }
        let params = generate_for(meta, &dataset, &config, video_dir)?;
        Self::new_direct(config, dataset, params, true)
    }

    /// Resumes from a checkpoint; `datasets` must match its video ids.
    pub fn resume(ckpt: Checkpoint<S>, datasets: Vec<VideoDataset>) -> Result<Self> {
        let ids: Vec<&str> = datasets.iter().map(|d| d.id.as_str()).collect();
        if ids != ckpt.header.video_ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Checkpoint(format!(
                "checkpoint trained on {:?}, got {:?}",
                ckpt.header.video_ids, ids
            )));
        }
        let config = ckpt.header.config.clone();
        let engine = match ckpt.header.mode {
            CheckpointMode::Nvd => Engine::Direct {
                ids: direct_ids(&ckpt.params, &config.arch)?,
            },
            CheckpointMode::Meta => {
                let hyper = HyperNet::attach(&config.arch, &config.hyper, config.mrhe, &ckpt.params)?;
                let mut embeds = Vec::new();
                for ds in &datasets {
                    if let Some(id) = ckpt.params.id(&learnable_name(&ds.id)) {
                        embeds.push(EmbedSlot::Learnable(id));
                    } else {
                        let e = ckpt
                            .embedding(&ds.id)
                            .ok_or_else(|| Error::Checkpoint(format!("no embedding stored for `{}`", ds.id)))?;
                        embeds.push(EmbedSlot::Fixed(e.cast()));
                    }
                }
                Engine::Meta { hyper, embeds }
            }
        };
        let (it, pre) = (ckpt.header.iteration, ckpt.header.pretrained);
        Ok(Self::assemble(config, datasets, ckpt.params, ckpt.adam, engine, it, pre))
    }

    fn assemble(
        config: TrainConfig,
        datasets: Vec<VideoDataset>,
        store: ParamStore<S>,
        adam: Adam<S>,
        engine: Engine<S>,
        iteration: u64,
        pretrained: bool,
    ) -> Self {
        Self {
            weights: config.effective_losses(),
            config,
            datasets,
            store,
            adam,
            engine,
            iteration,
            pretrained,
            history: Vec::new(),
            log: None,
            started: Instant::now(),
        }
    }

    /// Sends newline-delimited JSON records to `sink`.
    pub fn set_log(&mut self, sink: Box<dyn Write>) {
        self.log = Some(sink);
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn loss_weights(&self) -> &LossWeights {
        &self.weights
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn is_pretrained(&self) -> bool {
        self.pretrained
    }

    pub fn store(&self) -> &ParamStore<S> {
        &self.store
    }

    pub fn optimizer(&self) -> &Adam<S> {
        &self.adam
    }

    pub fn datasets(&self) -> &[VideoDataset] {
        &self.datasets
    }

    pub fn history(&self) -> &[EvalRecord] {
        &self.history
    }

    pub fn is_meta(&self) -> bool {
        matches!(self.engine, Engine::Meta { .. })
    }

    pub fn hypernet(&self) -> Option<&HyperNet> {
        match &self.engine {
            Engine::Meta { hyper, .. } => Some(hyper),
            Engine::Direct { .. } => None,
        }
    }

    /// Video trained at `iteration` (strict round robin).
    pub fn video_at(&self, iteration: u64) -> usize {
        (iteration % self.datasets.len() as u64) as usize
    }

    fn model_vars(engine: &Engine<S>, tape: &mut Tape<'_, S>, arch: &NvdArch, video: usize) -> Result<NvdVars> {
        match engine {
            Engine::Direct { ids } => {
                let vars: Vec<Var> = ids.iter().map(|&id| tape.param(id)).collect();
                NvdVars::from_ordered(arch, &vars)
            }
            Engine::Meta { hyper, embeds } => {
                let e = match &embeds[video] {
                    EmbedSlot::Fixed(t) => tape.constant(t.clone())?,
                    EmbedSlot::Learnable(id) => tape.param(*id),
                };
                let vars = hyper.generate(tape, e)?;
                NvdVars::from_ordered(arch, &vars)
            }
        }
    }

    /// Embedding currently used for video `video` (meta mode only).
    pub fn embedding(&self, video: usize) -> Option<Tensor<S>> {
        match &self.engine {
            Engine::Meta { embeds, .. } => Some(match &embeds[video] {
                EmbedSlot::Fixed(t) => t.clone(),
                EmbedSlot::Learnable(id) => self.store.value(*id).clone(),
            }),
            Engine::Direct { .. } => None,
        }
    }

    /// Model parameters currently produced for video `video`.
    pub fn model_params(&self, video: usize) -> Result<ParamStore<S>> {
        match &self.engine {
            Engine::Direct { .. } => Ok(self.store.clone()),
            Engine::Meta { hyper, .. } => hyper.generate_store(&self.store, &self.embedding(video).expect("meta")),
        }
    }

    fn diverged(&self, loss: f64) -> Error {
        Error::Diverged {
            iteration: self.iteration,
            loss,
        }
    }

    /// Pre-trains every layer's mapping towards the scaled identity.
    /// Returns the loss at each pre-training iteration.
    pub fn pretrain(&mut self) -> Result<Vec<f64>> {
        let mut adam = routed_adam(&self.store, &self.config)?;
        let mut losses = Vec::with_capacity(self.config.pretrain_iterations as usize);
        for i in 0..self.config.pretrain_iterations {
            let mut rng = iteration_rng(self.config.seed, PRETRAIN_STREAM + i);
            let coords = random_coords::<S>(self.config.batch_size, &mut rng)?;
            let video = (i % self.datasets.len() as u64) as usize;
            self.store.zero_grads();
            let (view, mut sink) = self.store.split();
            let mut tape = Tape::new(view);
            let vars = Self::model_vars(&self.engine, &mut tape, &self.config.arch, video)?;
            let loss = pretrain_objective(&mut tape, &self.config.arch, &vars, &coords)?;
            let value = tape.value(loss).item().to_f64_lossy();
            if !value.is_finite() || value > self.config.divergence_limit {
                return Err(self.diverged(value));
            }
            tape.backward(loss, &mut sink)?;
            drop(tape);
            adam.step(&mut self.store)?;
            losses.push(value);
            self.emit(json!({"phase": "pretrain", "iteration": i, "loss": value}))?;
        }
        self.pretrained = true;
        Ok(losses)
    }

    /// Mean distance `|M(p) - 0.9 (x, y)|` over a `grid x grid` lattice at
    /// `t = 0`, averaged over layers, for video `video`.
    pub fn mapping_error(&self, video: usize, grid: usize) -> Result<f64> {
        let mut coords = Vec::with_capacity(grid * grid * 3);
        for i in 0..grid {
            for j in 0..grid {
                let g = |k: usize| if grid > 1 { 2.0 * k as f64 / (grid - 1) as f64 - 1.0 } else { 0.0 };
                coords.extend([S::from_f64_lossy(g(j)), S::from_f64_lossy(g(i)), S::zero()]);
            }
        }
        let mut tape = Tape::new(self.store.view());
        let vars = Self::model_vars(&self.engine, &mut tape, &self.config.arch, video)?;
        let p = tape.constant(Tensor::new([grid * grid, 3], coords.clone())?)?;
        let mut total = 0.0;
        let layers = self.config.arch.layer_count();
        for l in 0..layers {
            let m = map_points(&mut tape, &vars, l, p)?;
            for (k, uv) in tape.value(m).data().chunks_exact(2).enumerate() {
                let dx = uv[0].to_f64_lossy() - PRETRAIN_SCALE * coords[k * 3].to_f64_lossy();
                let dy = uv[1].to_f64_lossy() - PRETRAIN_SCALE * coords[k * 3 + 1].to_f64_lossy();
                total += (dx * dx + dy * dy).sqrt();
            }
        }
        Ok(total / (layers * grid * grid) as f64)
    }

    /// One optimisation step at the current iteration.
    pub fn step(&mut self) -> Result<LossReport> {
        let it = self.iteration;
        let video = self.video_at(it);
        let ds = &self.datasets[video];
        let mut rng = iteration_rng(self.config.seed, it);
        let batch = sample_point_batch::<S, _>(ds, self.config.batch_size, self.config.patches, self.weights.ncc_patch, &mut rng)?;
        self.store.zero_grads();
        let (view, mut sink) = self.store.split();
        let mut tape = Tape::new(view);
        let outcome = Self::model_vars(&self.engine, &mut tape, &self.config.arch, video).and_then(|vars| {
            batch_loss(&mut tape, &self.config.arch, &vars, &batch, ds.width(), ds.height(), &self.weights, it)
        });
        let (loss, report) = match outcome {
            Ok(v) => v,
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged {
                    iteration: it,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        };
        if !report.total.is_finite() || report.total > self.config.divergence_limit {
            return Err(Error::Diverged {
                iteration: it,
                loss: report.total,
            });
        }
        match tape.backward(loss, &mut sink) {
            Ok(_) => {}
            Err(Error::NonFinite(_)) => {
                return Err(Error::Diverged {
                    iteration: it,
                    loss: f64::NAN,
                })
            }
            Err(e) => return Err(e),
        }
        drop(tape);
        self.adam.step(&mut self.store)?;
        self.iteration += 1;
        Ok(report)
    }

    /// PSNR and SSIM of the clamped reconstruction of video `video` over all
    /// pixels of all frames.
    pub fn evaluate(&self, video: usize) -> Result<EvalRecord> {
        let params = self.model_params(video)?;
        let ds = &self.datasets[video];
        let q = evaluate_params(&self.config.arch, &params, ds, self.config.eval_chunk)?;
        Ok(EvalRecord {
            iteration: self.iteration,
            video: ds.id.clone(),
            psnr: q.psnr,
            ssim: q.ssim,
            alpha_error: q.alpha_error,
        })
    }

    fn evaluate_all(&mut self) -> Result<()> {
        for v in 0..self.datasets.len() {
            let rec = self.evaluate(v)?;
            self.emit(json!({
                "phase": "eval",
                "iteration": rec.iteration,
                "video": rec.video,
                "psnr": rec.psnr,
                "ssim": rec.ssim,
                "alpha_error": rec.alpha_error,
                "elapsed_s": self.started.elapsed().as_secs_f64(),
            }))?;
            self.history.push(rec);
        }
        Ok(())
    }

    fn emit(&mut self, record: serde_json::Value) -> Result<()> {
        if let Some(log) = self.log.as_mut() {
            writeln!(log, "{record}").map_err(|e| Error::io("training log", e))?;
        }
        Ok(())
    }

    /// Runs pre-training if still pending, then steps until `until`,
    /// logging, evaluating and checkpointing at the configured intervals.
    /// On divergence the last periodic checkpoint stays on disk.
    pub fn run(&mut self, until: u64, checkpoint: Option<&Path>) -> Result<Option<LossReport>> {
        if !self.pretrained && self.iteration == 0 && self.config.pretrain_iterations > 0 {
            self.pretrain()?;
        }
        self.pretrained = true;
        let eval = self.config.eval_interval;
        if eval > 0 && self.history.is_empty() && self.iteration % eval == 0 && self.iteration < until {
            self.evaluate_all()?;
        }
        let mut last = None;
        while self.iteration < until {
            let video = self.video_at(self.iteration);
            let report = self.step()?;
            let it = self.iteration;
            let li = self.config.log_interval;
            if li > 0 && ((it - 1) % li == 0 || it == until) {
                let terms: serde_json::Map<String, serde_json::Value> =
                    report.terms.iter().map(|t| (t.name.clone(), json!(t.value))).collect();
                let id = self.datasets[video].id.clone();
                self.emit(json!({
                    "phase": "train",
                    "iteration": it - 1,
                    "video": id,
                    "terms": terms,
                    "total": report.total,
                    "elapsed_s": self.started.elapsed().as_secs_f64(),
                }))?;
            }
            if eval > 0 && (it % eval == 0 || it == until) {
                self.evaluate_all()?;
            }
            if let Some(path) = checkpoint {
                let ci = self.config.checkpoint_interval;
                if ci > 0 && it % ci == 0 {
                    self.checkpoint()?.save(path)?;
                }
            }
            last = Some(report);
        }
        if let Some(path) = checkpoint {
            self.checkpoint()?.save(path)?;
        }
        Ok(last)
    }

    /// Snapshot of the full training state.
    pub fn checkpoint(&self) -> Result<Checkpoint<S>> {
        let (mode, hyper, embeddings) = match &self.engine {
            Engine::Direct { .. } => (CheckpointMode::Nvd, None, Vec::new()),
            Engine::Meta { embeds, .. } => {
                let fixed = self
                    .datasets
                    .iter()
                    .zip(embeds)
                    .filter_map(|(ds, slot)| match slot {
                        EmbedSlot::Fixed(t) => Some((ds.id.clone(), t.cast::<f64>())),
                        EmbedSlot::Learnable(_) => None,
                    })
                    .collect();
                (CheckpointMode::Meta, Some(self.config.hyper.clone()), fixed)
            }
        };
        Ok(Checkpoint {
            header: CheckpointHeader {
                version: CHECKPOINT_VERSION,
                mode,
                precision: S::PRECISION,
                iteration: self.iteration,
                pretrained: self.pretrained,
                arch: self.config.arch.clone(),
                hyper,
                mrhe: self.config.mrhe,
                embedding: self.config.embedding,
                video_ids: self.datasets.iter().map(|d| d.id.clone()).collect(),
                config: self.config.clone(),
                config_digest: config_digest(&self.config)?,
                trainable: self.store.iter().map(|(_, n)| n.trainable).collect(),
            },
            params: self.store.clone(),
            adam: self.adam.clone(),
            embeddings,
        })
    }
}

/// Reconstruction quality of a model on a whole video.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Quality {
    pub psnr: f64,
    pub ssim: f64,
    pub alpha_error: f64,
}

/// PSNR and mean SSIM of the clamped reconstruction of `ds`, and the mean
/// opacity error against its masks.
pub fn evaluate_params<S: Real>(arch: &NvdArch, params: &ParamStore<S>, ds: &VideoDataset, chunk: usize) -> Result<Quality> {
    let (f, h, w) = (ds.frame_count(), ds.height(), ds.width());
    let out = render_video(arch, params, f, h, w, chunk)?;
    let gt = ds.frames.to_f64_vec();
    let nf = arch.foreground_layers;
    let alpha_error = out
        .alpha
        .data()
        .chunks_exact(nf)
        .zip(ds.masks.data())
        .map(|(a, &m)| (a.iter().cloned().fold(f64::MIN, f64::max) - m as f64).abs())
        .sum::<f64>()
        / ds.masks.len() as f64;
    Ok(Quality {
        psnr: psnr(out.color.data(), &gt)?,
        ssim: video_ssim(out.color.data(), &gt, f, h, w)?,
        alpha_error,
    })
}

/// Model parameters a checkpoint yields for `ds`: the stored set for a
/// direct checkpoint, or the metamodel output for the video's embedding.
pub fn generate_for<S: Real>(ckpt: &Checkpoint<S>, ds: &VideoDataset, config: &TrainConfig, video_dir: Option<&Path>) -> Result<ParamStore<S>> {
    match ckpt.header.mode {
        CheckpointMode::Nvd => {
            direct_ids(&ckpt.params, &ckpt.header.arch)?;
            Ok(ckpt.params.clone())
        }
        CheckpointMode::Meta => {
            let h = &ckpt.header;
            let hcfg = h.hyper.clone().unwrap_or_default();
            let hyper = HyperNet::attach(&h.arch, &hcfg, h.mrhe, &ckpt.params)?;
            let e: Tensor<S> = if let Some(id) = ckpt.params.id(&learnable_name(&ds.id)) {
                ckpt.params.value(id).clone()
            } else if let Some(e) = ckpt.embedding(&ds.id) {
                e.cast()
            } else {
                let mut c = config.clone();
                c.embedding = match h.embedding {
                    EmbeddingSource::File => EmbeddingSource::File,
                    _ => EmbeddingSource::Descriptor,
                };
                c.resolve_embedding(ds, video_dir)?.cast()
            };
            hyper.generate_store(&ckpt.params, &e)
        }
    }
}
