//! `nova`: dataset synthesis, training, generation, extrapolation, mask
//! inspection, benchmarking and evaluation.
//!
//! Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use nova_core::attention::{build_block_causal_mask, render_mask, BlockLayout};
use nova_core::data::{caption_of, motion_score, read_dataset, write_dataset, SPEEDS};
use nova_core::eval::{extrapolation_psnr, next_frame};
use nova_core::io::{load_nvt, write_ppm};
use nova_core::model::{GenOptions, Nova, NovaConfig, TemporalMode};
use nova_core::train::{
    configure_threads, init_from_stage1, load_checkpoint, load_samples, save_checkpoint, synth_samples, RunConfig,
    Trainer,
};
use nova_core::{NovaError, ParamStore, Tensor};

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] NovaError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(NovaError::Config(_) | NovaError::Contract(_)) => 2,
            CliError::Core(NovaError::Numeric(_)) => 4,
            CliError::Core(_) | CliError::Io(_) => 3,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Parser)]
#[command(name = "nova", version, about = "Autoregressive video generation without vector quantization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render synthetic moving-shape clips with a manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        /// Pixel frames per clip.
        #[arg(long, default_value_t = 10)]
        frames: usize,
    },
    /// Train from a JSON run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint with the same model config.
        #[arg(long, conflicts_with = "init_from")]
        resume: Option<PathBuf>,
        /// Stage-2 start: copy parameters from a checkpoint trained with a
        /// different frame count.
        #[arg(long)]
        init_from: Option<PathBuf>,
    },
    /// Text-to-video generation to PPM frames.
    Generate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        prompt_id: usize,
        /// Latent frames; each decodes to `stride_t` pixel frames.
        #[arg(long)]
        frames: Option<usize>,
        #[arg(long, default_value_t = 7.0)]
        cfg_scale: f64,
        #[arg(long, default_value_t = 128)]
        ar_steps: usize,
        #[arg(long)]
        infer_steps: Option<usize>,
        /// Motion score; defaults to the caption's speed in pixels per frame.
        #[arg(long)]
        motion: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: Option<TemporalMode>,
        /// Re-run the temporal stack over the whole prefix for every frame.
        #[arg(long)]
        no_cache: bool,
    },
    /// Continue a video past its end.
    Extrapolate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seed_video: PathBuf,
        /// Extra latent frames.
        #[arg(long)]
        extra: usize,
        /// Full-length reference video for per-frame PSNR.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[arg(long)]
        prompt_id: Option<usize>,
        #[arg(long)]
        cfg_scale: Option<f64>,
        #[arg(long)]
        ar_steps: Option<usize>,
        #[arg(long)]
        infer_steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the block-causal temporal mask.
    InspectMask {
        #[arg(long)]
        prefix: usize,
        #[arg(long)]
        frames: usize,
        #[arg(long)]
        tokens: usize,
    },
    /// Wall time of causal and joint generation.
    Bench {
        /// Without a checkpoint the default model at random init is timed.
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long)]
        ar_steps: Option<usize>,
        #[arg(long)]
        infer_steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Next-frame and extrapolation PSNR over a dataset directory (CSV).
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        testset: PathBuf,
        /// Latent frames given before extrapolating.
        #[arg(long, default_value_t = 1)]
        context: usize,
        #[arg(long)]
        ar_steps: Option<usize>,
        #[arg(long)]
        infer_steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_mode(s: &str) -> Result<TemporalMode, String> {
    match s {
        "causal" => Ok(TemporalMode::Causal),
        "joint" => Ok(TemporalMode::Joint),
        other => Err(format!("unknown temporal mode {other:?} (causal|joint)")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Ok(n) = std::env::var("NOVA_THREADS") {
        match n.parse::<usize>() {
            Ok(n) if n > 0 => {
                if let Err(e) = configure_threads(n) {
                    eprintln!("error: {e}");
                    return ExitCode::from(2);
                }
            }
            _ => {
                eprintln!("error: NOVA_THREADS must be a positive integer, got {n:?}");
                return ExitCode::from(2);
            }
        }
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::Synth {
            out,
            count,
            seed,
            height,
            width,
            frames,
        } => {
            let entries = write_dataset(&out, count, seed, (height, width, frames))?;
            println!("wrote {} clips to {}", entries.len(), out.display());
            Ok(())
        }
        Command::Train {
            config,
            resume,
            init_from,
        } => train(&config, resume.as_deref(), init_from.as_deref()),
        Command::Generate {
            ckpt,
            prompt_id,
            frames,
            cfg_scale,
            ar_steps,
            infer_steps,
            motion,
            seed,
            out,
            mode,
            no_cache,
        } => {
            let (model, store) = load(&ckpt)?;
            if prompt_id >= model.cfg.prompt_vocab {
                return Err(CliError::Usage(format!(
                    "prompt id {prompt_id} outside the vocabulary of {}",
                    model.cfg.prompt_vocab
                )));
            }
            let mode = mode.unwrap_or(model.cfg.temporal_mode);
            if no_cache && mode == TemporalMode::Joint {
                return Err(CliError::Usage("--no-cache applies to causal mode only".into()));
            }
            let motion = motion.unwrap_or_else(|| default_motion(prompt_id));
            let opts = GenOptions {
                frames: frames.unwrap_or(model.cfg.frames),
                cfg_scale,
                ar_steps,
                infer_steps: infer_steps.unwrap_or(model.cfg.infer_steps),
                use_cache: !no_cache,
                mode,
                ..GenOptions::from_config(&model.cfg, prompt_id, motion, seed)
            };
            let g = model.generate_video(&store, &opts)?;
            let video = model.decode_tokens(&g.tokens)?;
            let files = write_frames(&out, &video)?;
            let manifest = json!({
                "prompt_id": prompt_id,
                "caption": caption_of(prompt_id),
                "motion": motion,
                "latent_frames": opts.frames,
                "cfg_scale": cfg_scale,
                "ar_steps": ar_steps,
                "infer_steps": opts.infer_steps,
                "seed": seed,
                "frames": files,
            });
            write_json(&out.join("manifest.json"), &manifest)?;
            println!("wrote {} frames to {}", files.len(), out.display());
            Ok(())
        }
        Command::Extrapolate {
            ckpt,
            seed_video,
            extra,
            ground_truth,
            prompt_id,
            cfg_scale,
            ar_steps,
            infer_steps,
            seed,
            out,
        } => {
            let (model, store) = load(&ckpt)?;
            let (_, video) = load_nvt::<f32>(&seed_video)?;
            let prompt = prompt_id.unwrap_or(model.cfg.null_prompt());
            let opts = GenOptions {
                cfg_scale: cfg_scale.unwrap_or(model.cfg.cfg_scale),
                ar_steps: ar_steps.unwrap_or(model.cfg.ar_steps),
                infer_steps: infer_steps.unwrap_or(model.cfg.infer_steps),
                ..GenOptions::from_config(&model.cfg, prompt, motion_score(&video)?, seed)
            };
            let tokens = model.encode_video(&video)?;
            let seed_frames = tokens.shape()[0];
            let g = model.extrapolate(&store, &tokens, extra, &opts)?;
            let pixels = model.decode_tokens(&g.tokens)?;
            let files = write_frames(&out, &pixels)?;
            if let Some(gt) = ground_truth {
                let (_, truth) = load_nvt::<f32>(&gt)?;
                if truth.shape() != pixels.shape() {
                    return Err(CliError::Usage(format!(
                        "ground truth {:?} does not match the extended video {:?}",
                        truth.shape(),
                        pixels.shape()
                    )));
                }
                let mut csv = String::from("frame,psnr_db\n");
                for f in seed_video_frames(&model, seed_frames)..pixels.shape()[0] {
                    let p = nova_core::data::psnr(&pixels.slice_rows(f, f + 1)?, &truth.slice_rows(f, f + 1)?)?;
                    csv.push_str(&format!("{f},{p:.4}\n"));
                }
                std::fs::write(out.join("psnr.csv"), &csv)?;
                print!("{csv}");
            }
            write_json(
                &out.join("manifest.json"),
                &json!({"seed_frames": seed_frames, "extra": extra, "prompt_id": prompt, "seed": seed, "frames": files}),
            )?;
            Ok(())
        }
        Command::InspectMask { prefix, frames, tokens } => {
            let layout = BlockLayout::uniform(prefix, frames, tokens)?;
            print!("{}", render_mask(&build_block_causal_mask(&layout)));
            Ok(())
        }
        Command::Bench {
            ckpt,
            frames,
            ar_steps,
            infer_steps,
            seed,
        } => {
            let (model, store) = match ckpt {
                Some(p) => load(&p)?,
                None => Nova::new::<f32>(NovaConfig::default())?,
            };
            for mode in [TemporalMode::Causal, TemporalMode::Joint] {
                let opts = GenOptions {
                    frames,
                    ar_steps: ar_steps.unwrap_or(model.cfg.ar_steps),
                    infer_steps: infer_steps.unwrap_or(model.cfg.infer_steps),
                    mode,
                    ..GenOptions::from_config(&model.cfg, 0, 1.0, seed)
                };
                let t = model.generate_video(&store, &opts)?.timings;
                let (a, b) = (t.temporal.as_secs_f64(), t.spatial.as_secs_f64());
                let name = if mode == TemporalMode::Causal { "causal" } else { "joint" };
                println!("mode={name} temporal={a:.4} spatial={b:.4} total={:.4}", a + b);
            }
            Ok(())
        }
        Command::Eval {
            ckpt,
            testset,
            context,
            ar_steps,
            infer_steps,
            seed,
        } => {
            let (model, store) = load(&ckpt)?;
            let clips = read_dataset::<f32>(&testset)?;
            if clips.is_empty() {
                return Err(NovaError::Format(format!("{} lists no clips", testset.display())).into());
            }
            println!("video,next_frame_psnr,copy_last_psnr,extrapolated_frame,psnr");
            for (i, (entry, video)) in clips.iter().enumerate() {
                let opts = GenOptions {
                    ar_steps: ar_steps.unwrap_or(model.cfg.ar_steps),
                    infer_steps: infer_steps.unwrap_or(model.cfg.infer_steps),
                    ..GenOptions::from_config(&model.cfg, entry.prompt_id, 1.0, seed.wrapping_add(i as u64))
                };
                let nf = next_frame(&model, &store, video, entry.prompt_id, &opts)?;
                let (_, scores) = extrapolation_psnr(&model, &store, video, context, entry.prompt_id, &opts)?;
                for (k, p) in scores.iter().enumerate() {
                    println!(
                        "{},{:.4},{:.4},{},{:.4}",
                        entry.path,
                        nf.predicted,
                        nf.copy_pixel,
                        context + k,
                        p
                    );
                }
            }
            Ok(())
        }
    }
}

fn seed_video_frames(model: &Nova, latent_frames: usize) -> usize {
    latent_frames * model.cfg.stride_t
}

/// Speed in pixels per frame named by a caption; zero for the null prompt.
fn default_motion(prompt_id: usize) -> f64 {
    if caption_of(prompt_id).is_none() {
        return 0.0;
    }
    SPEEDS[prompt_id % SPEEDS.len()].0 as f64
}

fn load(path: &Path) -> CliResult<(Nova, ParamStore<f32>)> {
    if !path.exists() {
        return Err(CliError::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("checkpoint {} not found", path.display()),
        )));
    }
    Ok(load_checkpoint::<f32>(path)?)
}

fn write_frames(dir: &Path, video: &Tensor<f32>) -> CliResult<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let frame_shape = &video.shape()[1..];
    (0..video.shape()[0])
        .map(|t| {
            let name = format!("frame_{t:04}.ppm");
            let frame = video.slice_rows(t, t + 1)?.into_reshape(frame_shape)?;
            write_ppm(&dir.join(&name), &frame)?;
            Ok(name)
        })
        .collect()
}

fn write_json(path: &Path, value: &serde_json::Value) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(NovaError::from)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn train(config: &Path, resume: Option<&Path>, init_from: Option<&Path>) -> CliResult<()> {
    let text = std::fs::read_to_string(config)?;
    let run = RunConfig::from_json(&text)?;
    let (model, store) = match (resume, init_from) {
        (Some(p), _) => {
            let (model, store) = load(p)?;
            if model.cfg != run.model {
                return Err(CliError::Usage(format!(
                    "{} was trained with a different model config; use --init-from for a stage change",
                    p.display()
                )));
            }
            (model, store)
        }
        (None, Some(p)) => {
            let (_, stage1) = load(p)?;
            init_from_stage1(run.model.clone(), &stage1)?
        }
        (None, None) => Nova::new::<f32>(run.model.clone())?,
    };
    let data = match &run.train.data_dir {
        Some(dir) => load_samples::<f32>(&model, dir)?,
        None => synth_samples::<f32>(&model, run.train.videos, run.train.seed)?
            .into_iter()
            .map(|s| s.truncated(model.cfg.frames))
            .collect::<Result<_, _>>()?,
    };
    let ckpt = run.train.checkpoint.clone();
    let every = run.train.checkpoint_every;
    let mut trainer = Trainer::new(model, store, run.train)?;
    trainer.run_with(&data, |t, line| {
        println!("{line}");
        if every > 0 && line.step % every == 0 {
            save_checkpoint(&ckpt, &t.store, &t.model.cfg)?;
        }
        Ok(())
    })?;
    save_checkpoint(&ckpt, &trainer.store, &trainer.model.cfg)?;
    eprintln!("saved {}", ckpt.display());
    Ok(())
}
