//! `nvd`: synthetic data, training, decomposition, atlas editing and checks.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hypernvd::atlas::{export_atlas, parse_layer, recompose_video, render_atlas, TextureAtlas, DEFAULT_ATLAS_SIZE};
use hypernvd::dataio::{gate_coverage, load_tensor, load_video_dataset, save_tensor, synth_write, write_png, SynthSceneSpec, VideoDataset};
use hypernvd::diffcore::{ParamStore, Tensor};
use hypernvd::gradcheck::{loss_suite, SUITE_TOLERANCE};
use hypernvd::hypernet::{compress_embedding, EmbeddingSource, MrheMode};
use hypernvd::metrics::{psnr, video_ssim};
use hypernvd::model::{render_video, NvdArch};
use hypernvd::trainer::{evaluate_params, file_digest, generate_for, Checkpoint, CheckpointMode, TrainConfig, Trainer};
use hypernvd::{Error, Result};

#[derive(Parser)]
#[command(name = "nvd", version, about = "Layered neural video decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EmbedArg {
    File,
    Descriptor,
    Learnable,
}

#[derive(Clone, Copy, ValueEnum)]
enum MrheArg {
    Hyper,
    Universal,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic translating-sprite scene.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sprite velocity in pixels per frame, `VX,VY`.
        #[arg(long, default_value = "1,0.5", value_parser = parse_pair)]
        velocity: (f64, f64),
    },
    /// Train a single-video metamodel.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: RunArgs,
    },
    /// Train a metamodel over several videos.
    TrainMeta {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', required = true)]
        videos: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        embed: Option<EmbedArg>,
        #[arg(long, value_enum)]
        mrhe: Option<MrheArg>,
        /// Continue the run stored in this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: RunArgs,
    },
    /// Fine-tune a model initialised by a metamodel (or from scratch).
    Finetune {
        #[arg(long)]
        meta: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Random initialisation baseline with the same configuration.
        #[arg(long)]
        scratch: bool,
        #[command(flatten)]
        common: RunArgs,
    },
    /// Write opacities, residuals, reconstruction and atlases of a video.
    Decompose {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_ATLAS_SIZE)]
        atlas_size: usize,
    },
    /// Render one layer's texture atlas to PNG.
    RenderAtlas {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long, default_value_t = DEFAULT_ATLAS_SIZE)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Video selecting the metamodel embedding (meta checkpoints).
        #[arg(long)]
        video: Option<PathBuf>,
    },
    /// Recompose a video with an edited atlas.
    ApplyEdit {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        layer: String,
        #[arg(long)]
        atlas: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Reconstruction PSNR and SSIM of a video.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
    },
    /// Compress a `[768, P]` feature matrix to a 768-entry embedding.
    CompressEmbed {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-2)]
        lr: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Finite-difference check of every loss term.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Entries sampled per parameter tensor.
        #[arg(long, default_value_t = 3)]
        per_tensor: usize,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    /// Newline-delimited JSON training log.
    #[arg(long)]
    log: Option<PathBuf>,
}

fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected VX,VY")?;
    let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v}: {e}"));
    Ok((p(a)?, p(b)?))
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_json_file(p),
        None => Ok(TrainConfig::default()),
    }
}

fn apply_run_args(cfg: &mut TrainConfig, args: &RunArgs) {
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    if let Some(n) = args.iterations {
        cfg.iterations = n;
    }
}

fn attach_log(trainer: &mut Trainer<f32>, args: &RunArgs) -> Result<()> {
    if let Some(path) = &args.log {
        let f = File::create(path).map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        trainer.set_log(Box::new(BufWriter::new(f)));
    }
    Ok(())
}

fn report_final(trainer: &Trainer<f32>, out: &Path) -> Result<()> {
    for v in 0..trainer.datasets().len() {
        let q = trainer.evaluate(v)?;
        println!(
            "video={} iteration={} psnr={:.4} ssim={:.4} alpha_error={:.4}",
            q.video, q.iteration, q.psnr, q.ssim, q.alpha_error
        );
    }
    println!("checkpoint={}", out.display());
    Ok(())
}

fn train_meta(cfg: TrainConfig, out: &Path, resume: Option<&Path>, args: &RunArgs) -> Result<()> {
    let mut trainer = match resume {
        Some(path) => {
            let ckpt = Checkpoint::<f32>::load_mode(path, CheckpointMode::Meta)?;
            let datasets = ckpt.header.config.load_videos()?;
            Trainer::resume(ckpt, datasets)?
        }
        None => {
            let datasets = cfg.load_videos()?;
            Trainer::new_meta(cfg, datasets)?
        }
    };
    attach_log(&mut trainer, args)?;
    let until = trainer.config().iterations;
    trainer.run(until, Some(out))?;
    report_final(&trainer, out)
}

/// Model parameters of `ckpt` for the video in `dir`.
fn model_for(ckpt: &Checkpoint<f32>, ds: &VideoDataset, dir: &Path) -> Result<ParamStore<f32>> {
    generate_for(ckpt, ds, &ckpt.header.config, Some(dir))
}

fn load_video(dir: &Path, ckpt: &Checkpoint<f32>) -> Result<VideoDataset> {
    load_video_dataset(dir, ckpt.header.config.losses.flow_threshold)
}

fn frame_slice(data: &[f64], t: usize, plane: usize) -> &[f64] {
    &data[t * plane..(t + 1) * plane]
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            out,
            size,
            frames,
            seed,
            velocity,
        } => {
            let spec = SynthSceneSpec::centred(size, frames, seed, velocity);
            let ds = synth_write(&spec, &out)?;
            println!(
                "video={} frames={} height={} width={} gate_coverage={:.6} out={}",
                ds.id,
                ds.frame_count(),
                ds.height(),
                ds.width(),
                gate_coverage(&ds),
                out.display()
            );
        }
        Command::Train {
            config,
            video,
            out,
            common,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.videos = vec![video];
            apply_run_args(&mut cfg, &common);
            train_meta(cfg, &out, None, &common)?;
        }
        Command::TrainMeta {
            config,
            videos,
            out,
            embed,
            mrhe,
            resume,
            common,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            cfg.videos = videos;
            if let Some(e) = embed {
                cfg.embedding = match e {
                    EmbedArg::File => EmbeddingSource::File,
                    EmbedArg::Descriptor => EmbeddingSource::Descriptor,
                    EmbedArg::Learnable => EmbeddingSource::Learnable,
                };
            }
            if let Some(m) = mrhe {
                cfg.mrhe = match m {
                    MrheArg::Hyper => MrheMode::Hyper,
                    MrheArg::Universal => MrheMode::Universal,
                };
            }
            apply_run_args(&mut cfg, &common);
            train_meta(cfg, &out, resume.as_deref(), &common)?;
        }
        Command::Finetune {
            meta,
            video,
            out,
            config,
            scratch,
            common,
        } => {
            let ckpt = Checkpoint::<f32>::load_mode(&meta, CheckpointMode::Meta)?;
            let mut cfg = match config {
                Some(p) => TrainConfig::from_json_file(p)?,
                None => ckpt.header.config.clone(),
            };
            cfg.videos = vec![video.clone()];
            apply_run_args(&mut cfg, &common);
            let ds = load_video_dataset(&video, cfg.losses.flow_threshold)?;
            let mut trainer = if scratch {
                Trainer::new_scratch(cfg, ds)?
            } else {
                Trainer::new_finetune(&ckpt, cfg, ds, Some(&video))?
            };
            attach_log(&mut trainer, &common)?;
            let until = trainer.config().iterations;
            trainer.run(until, Some(&out))?;
            report_final(&trainer, &out)?;
        }
        Command::Decompose {
            ckpt,
            video,
            out,
            atlas_size,
        } => {
            let c = Checkpoint::<f32>::load(&ckpt)?;
            let ds = load_video(&video, &c)?;
            let params = model_for(&c, &ds, &video)?;
            let arch = &c.header.arch;
            let (f, h, w) = (ds.frame_count(), ds.height(), ds.width());
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            let dense = render_video(arch, &params, f, h, w, c.header.config.eval_chunk)?;
            let nf = arch.foreground_layers;
            for t in 0..f {
                write_png(
                    out.join(format!("recon_{t:04}.png")),
                    w,
                    h,
                    3,
                    frame_slice(dense.color.data(), t, h * w * 3),
                )?;
                let alpha: Vec<f64> = frame_slice(dense.alpha.data(), t, h * w * nf)
                    .chunks_exact(nf)
                    .map(|a| a.iter().cloned().fold(0.0, f64::max))
                    .collect();
                write_png(out.join(format!("alpha_{t:04}.png")), w, h, 1, &alpha)?;
                for l in 0..arch.layer_count() {
                    let start = (l * f + t) * h * w;
                    let r: Vec<f64> = dense.residual.data()[start..start + h * w].iter().map(|x| x / 2.0).collect();
                    let label = hypernvd::atlas::layer_label(arch, l);
                    write_png(out.join(format!("residual_{label}_{t:04}.png")), w, h, 1, &r)?;
                }
            }
            let digest = file_digest(&ckpt)?;
            for l in 0..arch.layer_count() {
                let atlas = render_atlas(arch, &params, l, atlas_size)?;
                let label = hypernvd::atlas::layer_label(arch, l);
                export_atlas(&atlas, arch, out.join(format!("atlas_{label}.png")), &digest)?;
            }
            let gt = ds.frames.to_f64_vec();
            println!(
                "video={} psnr={:.4} ssim={:.4} out={}",
                ds.id,
                psnr(dense.color.data(), &gt)?,
                video_ssim(dense.color.data(), &gt, f, h, w)?,
                out.display()
            );
        }
        Command::RenderAtlas {
            ckpt,
            layer,
            size,
            out,
            video,
        } => {
            let c = Checkpoint::<f32>::load(&ckpt)?;
            let params = match (&video, c.header.mode) {
                (Some(dir), _) => {
                    let ds = load_video(dir, &c)?;
                    model_for(&c, &ds, dir)?
                }
                (None, CheckpointMode::Nvd) => c.params.clone(),
                (None, CheckpointMode::Meta) => {
                    return Err(Error::InvalidArgument("a meta checkpoint needs --video to pick an embedding".into()))
                }
            };
            let arch = &c.header.arch;
            let l = parse_layer(arch, &layer)?;
            let atlas = render_atlas(arch, &params, l, size)?;
            export_atlas(&atlas, arch, &out, &file_digest(&ckpt)?)?;
            println!("layer={layer} size={size} out={}", out.display());
        }
        Command::ApplyEdit {
            ckpt,
            layer,
            atlas,
            video,
            out,
        } => {
            let c = Checkpoint::<f32>::load(&ckpt)?;
            let ds = load_video(&video, &c)?;
            let params = model_for(&c, &ds, &video)?;
            let arch = &c.header.arch;
            let l = parse_layer(arch, &layer)?;
            let edited = TextureAtlas::load_png(&atlas, l)?;
            let mut edits: Vec<Option<&TextureAtlas>> = vec![None; arch.layer_count()];
            edits[l] = Some(&edited);
            let (f, h, w) = (ds.frame_count(), ds.height(), ds.width());
            let frames = recompose_video(arch, &params, &edits, f, h, w)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                path: out.clone(),
                source: e,
            })?;
            for t in 0..f {
                write_png(
                    out.join(format!("edit_{t:04}.png")),
                    w,
                    h,
                    3,
                    frame_slice(frames.data(), t, h * w * 3),
                )?;
            }
            println!("layer={layer} frames={f} out={}", out.display());
        }
        Command::Eval { ckpt, video } => {
            let c = Checkpoint::<f32>::load(&ckpt)?;
            let ds = load_video(&video, &c)?;
            let params = model_for(&c, &ds, &video)?;
            let q = evaluate_params(&c.header.arch, &params, &ds, c.header.config.eval_chunk)?;
            println!("psnr={:.6} ssim={:.6} alpha_error={:.6}", q.psnr, q.ssim, q.alpha_error);
        }
        Command::CompressEmbed {
            features,
            out,
            epochs,
            lr,
            seed,
        } => {
            let feats: Tensor<f64> = load_tensor(&features)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = compress_embedding(&feats, epochs, lr, &mut rng)?;
            save_tensor(&out, &c.embedding)?;
            println!(
                "length={} initial_l1={:.6e} final_l1={:.6e} out={}",
                c.embedding.len(),
                c.initial_l1,
                c.final_l1,
                out.display()
            );
        }
        Command::Gradcheck { seed, per_tensor } => {
            let mut failed = Vec::new();
            for check in loss_suite(seed, per_tensor, &NvdArch::default())? {
                let ok = check.passes();
                println!(
                    "term={} max_rel_error={:.3e} entries={} skipped={} status={}",
                    check.term,
                    check.report.max_rel_error,
                    check.report.entries,
                    check.report.skipped,
                    if ok { "pass" } else { "fail" }
                );
                if !ok {
                    failed.push(check.term);
                }
            }
            if !failed.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "gradient check above {SUITE_TOLERANCE:e} for {}",
                    failed.join(", ")
                )));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
