//! `magicvid`: train the cascade's models on synthetic data, generate
//! videos, interpolate frame folders and run the preference evaluation
//! service.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 1 runtime error.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use candle_core::{DType, Device};
use clap::{Parser, Subcommand};
use magicvid_core::pipeline::{self, read_frames, write_frames, PipelineConfig};
use magicvid_core::synthetic::{make_corpus, CorpusKind, CorpusShape};
use magicvid_core::training;
use magicvid_core::vfi::{interpolate, plan, VfiModel};
use magicvid_eval::{load_pool, round2, EvalState};

#[derive(Parser)]
#[command(name = "magicvid", version, about = "Cascaded text-to-video generation at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage for one prompt and write frames plus a manifest.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Derive all stage seeds from this seed instead of the config's.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (defaults to the config's `output_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the per-stage output shapes without loading any weights.
    DryRun {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the latent codec.
    TrainCodec {
        #[arg(long)]
        config: PathBuf,
    },
    /// Jointly train the image-to-video model on stills and clips.
    TrainI2v {
        #[arg(long)]
        config: PathBuf,
    },
    /// Finetune the refinement motion stack against the shared spatial layers.
    FinetuneV2v {
        #[arg(long)]
        config: PathBuf,
    },
    /// Train the frame interpolator and its discriminator.
    TrainVfi {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run all four training jobs in order.
    TrainAll {
        #[arg(long)]
        config: PathBuf,
    },
    /// Interpolate a folder of PNG keyframes.
    Vfi {
        #[arg(long = "in")]
        input: PathBuf,
        /// Frames inserted between each pair of keyframes.
        #[arg(long)]
        gap: usize,
        #[arg(long)]
        out: PathBuf,
        /// Interpolator checkpoint; defaults to the one named in `--config`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic corpus (`shapes-image`, `shapes-video`, `triplets`) to disk.
    MakeCorpus {
        #[arg(long)]
        kind: CorpusKind,
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        frames: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve the blind pairwise evaluation API.
    EvalServe {
        /// JSON array of `{id, prompt, ours, theirs, competitor}`.
        #[arg(long)]
        pool: PathBuf,
        /// Append-only vote log; replayed on start.
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
    },
    /// Print Good/Same/Bad tallies replayed from a vote log.
    EvalStats {
        #[arg(long)]
        log: PathBuf,
    },
}

/// Marks errors that should exit with the usage/config code.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn load_config(path: &Path) -> anyhow::Result<PipelineConfig> {
    Ok(PipelineConfig::load(path)?)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let config = err.chain().any(|e| {
        e.downcast_ref::<Usage>().is_some()
            || matches!(e.downcast_ref::<magicvid_core::Error>(), Some(magicvid_core::Error::Config(_)))
            || matches!(e.downcast_ref::<magicvid_eval::EvalError>(), Some(magicvid_eval::EvalError::Pool(_)))
    });
    if config {
        2
    } else {
        1
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Generate {
            config,
            prompt,
            seed,
            out,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg = cfg.with_seed(s);
            }
            let out = out.unwrap_or_else(|| cfg.output_dir.clone());
            let manifest = pipeline::run(&prompt, &cfg, Some(&out))?;
            for s in &manifest.stages {
                println!(
                    "{:<4} {:>3} frames {}x{}  {:.1}s  {}",
                    s.stage,
                    s.frames,
                    s.shape[2],
                    s.shape[3],
                    s.wall_clock_s,
                    &s.digest[..16]
                );
            }
            println!("final frames: {}", manifest.final_frames);
            println!("manifest: {}", out.join("manifest.json").display());
        }
        Command::DryRun { config } => println!("{}", pipeline::dry_run(&load_config(&config)?)?),
        Command::TrainCodec { config } => {
            let log = training::train_codec_job(&load_config(&config)?)?;
            report("codec", log.iter().map(|r| r.loss));
        }
        Command::TrainI2v { config } => {
            let log = training::train_i2v_job(&load_config(&config)?)?;
            report("i2v", log.iter().map(|r| r.loss));
        }
        Command::FinetuneV2v { config } => {
            let log = training::finetune_v2v_job(&load_config(&config)?)?;
            report("v2v", log.iter().map(|r| r.loss));
        }
        Command::TrainVfi { config } => {
            let log = training::train_vfi_job(&load_config(&config)?)?;
            report("vfi l1", log.iter().map(|r| r.l1));
        }
        Command::TrainAll { config } => {
            let cfg = load_config(&config)?;
            report("codec", training::train_codec_job(&cfg)?.iter().map(|r| r.loss));
            report("i2v", training::train_i2v_job(&cfg)?.iter().map(|r| r.loss));
            report("v2v", training::finetune_v2v_job(&cfg)?.iter().map(|r| r.loss));
            report("vfi l1", training::train_vfi_job(&cfg)?.iter().map(|r| r.l1));
        }
        Command::Vfi {
            input,
            gap,
            out,
            checkpoint,
            config,
        } => {
            let ckpt = match (checkpoint, config) {
                (Some(c), _) => c,
                (None, Some(cfg)) => load_config(&cfg)?.checkpoints.vfi,
                (None, None) => return Err(Usage("vfi needs --checkpoint or --config".into()).into()),
            };
            let frames = read_frames(&input).with_context(|| format!("reading {}", input.display()))?;
            let model = VfiModel::load(&ckpt, DType::F32, &Device::Cpu)?;
            let result = interpolate(&model, &frames, &plan(frames.len(), gap)?)?;
            write_frames(&out, &result)?;
            println!("{} keyframes -> {} frames in {}", frames.len(), result.len(), out.display());
        }
        Command::MakeCorpus {
            kind,
            count,
            seed,
            size,
            frames,
            out,
        } => {
            let corpus = make_corpus(kind, count, seed, CorpusShape { size, frames })?;
            corpus.save(&out)?;
            println!("{} {kind} items in {}", corpus.len(), out.display());
        }
        Command::EvalServe { pool, log, seed, bind } => {
            let pool = load_pool(&pool).map_err(|e| Usage(format!("{}: {e}", pool.display())))?;
            let state = EvalState::with_log(pool, seed, &log)?;
            tokio::runtime::Runtime::new()?.block_on(magicvid_eval::http::serve(state, bind))?;
        }
        Command::EvalStats { log } => {
            for t in magicvid_eval::replay_log(&log)? {
                let ratio = t.ratio().map_or("undefined".to_string(), |r| format!("{:.2} ({r})", round2(r)));
                println!("{:<16} G {:>6} S {:>6} B {:>6} ratio {ratio}", t.competitor, t.good, t.same, t.bad);
            }
        }
    }
    Ok(())
}

fn report(name: &str, losses: impl Iterator<Item = f64>) {
    let v: Vec<f64> = losses.collect();
    if let (Some(first), Some(last)) = (v.first(), v.last()) {
        println!("{name}: {} steps, loss {first:.5} -> {last:.5}", v.len());
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
