//! Training jobs driven by a pipeline config: each one builds its synthetic
//! corpus, trains, writes its checkpoint and a loss CSV.

use std::path::{Path, PathBuf};

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::diffusion::NoiseSchedule;
use crate::error::Result;
use crate::model::VideoModel;
use crate::pipeline::PipelineConfig;
use crate::rng::derive_seed;
use crate::synthetic::{make_corpus, CorpusKind, CorpusShape};
use crate::trainer::{
    encode_corpus, finetune_v2v_motion, joint_train, train_codec, write_loss_csv, CodecTrainConfig, EncodedClip,
    JointTrainConfig, LossRecord,
};
use crate::vfi::{train_vfi, VfiModel, VfiStepLog, VfiTrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Seed for weight initialization.
    pub init_seed: u64,
    /// Seed for the synthetic corpora.
    pub corpus_seed: u64,
    pub images: usize,
    pub videos: usize,
    /// Clips rendered at the refinement size for the motion finetune.
    pub hires_videos: usize,
    pub triplets: usize,
    /// Side length of interpolation training frames.
    pub vfi_size: usize,
    pub codec: CodecTrainConfig,
    pub i2v: JointTrainConfig,
    pub v2v: JointTrainConfig,
    pub vfi: VfiTrainConfig,
    /// Where loss CSVs are written.
    pub log_dir: PathBuf,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            init_seed: 0,
            corpus_seed: 0,
            images: 512,
            videos: 256,
            hires_videos: 64,
            triplets: 512,
            vfi_size: 32,
            codec: CodecTrainConfig::default(),
            i2v: JointTrainConfig::default(),
            v2v: JointTrainConfig {
                mix_ratio: 0.0,
                video_batch: 1,
                ..JointTrainConfig::default()
            },
            vfi: VfiTrainConfig::default(),
            log_dir: "logs".into(),
        }
    }
}

fn corpus_seed(cfg: &PipelineConfig, label: u64) -> u64 {
    derive_seed(cfg.training.corpus_seed, label)
}

fn log_path(cfg: &PipelineConfig, name: &str) -> PathBuf {
    cfg.training.log_dir.join(name)
}

pub fn train_codec_job(cfg: &PipelineConfig) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let t = &cfg.training;
    let shape = CorpusShape {
        size: cfg.geometry.i2v_size,
        frames: 1,
    };
    let images = make_corpus(CorpusKind::ShapesImage, t.images, corpus_seed(cfg, 1), shape)?.into_samples()?;
    let images: Vec<_> = images.into_iter().flat_map(|s| s.frames).collect();
    let mut codec = LatentCodec::new(cfg.codec.clone(), derive_seed(t.init_seed, 10), DType::F32, &Device::Cpu)?;
    let log = train_codec(&mut codec, &images, &t.codec)?;
    codec.save(&cfg.checkpoints.codec)?;
    write_loss_csv(&log_path(cfg, "codec_loss.csv"), &log)?;
    Ok(log)
}

pub fn train_i2v_job(cfg: &PipelineConfig) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let t = &cfg.training;
    let dev = Device::Cpu;
    let codec = LatentCodec::load(&cfg.checkpoints.codec, DType::F32, &dev)?;
    let g = &cfg.geometry;
    let images = make_corpus(
        CorpusKind::ShapesImage,
        t.images,
        corpus_seed(cfg, 2),
        CorpusShape { size: g.i2v_size, frames: 1 },
    )?
    .into_samples()?;
    let videos = make_corpus(
        CorpusKind::ShapesVideo,
        t.videos,
        corpus_seed(cfg, 3),
        CorpusShape {
            size: g.i2v_size,
            frames: g.i2v_frames,
        },
    )?
    .into_samples()?;
    let images = encode_corpus(&codec, &images)?;
    let videos = encode_corpus(&codec, &videos)?;
    let schedule = NoiseSchedule::linear(&cfg.schedule)?;
    let model = VideoModel::new(cfg.model.clone(), derive_seed(t.init_seed, 11), DType::F32, &dev)?;
    let log = joint_train(&model, &schedule, &images, &videos, &t.i2v)?;
    model.save(&cfg.checkpoints.i2v)?;
    write_loss_csv(&log_path(cfg, "i2v_loss.csv"), &log)?;
    Ok(log)
}

/// The refinement-size clip corpus the motion finetune trains on, encoded.
pub fn hires_corpus(cfg: &PipelineConfig, codec: &LatentCodec) -> Result<Vec<EncodedClip>> {
    let g = &cfg.geometry;
    let videos = make_corpus(
        CorpusKind::ShapesVideo,
        cfg.training.hires_videos,
        corpus_seed(cfg, 4),
        CorpusShape {
            size: g.v2v_size,
            frames: g.i2v_frames,
        },
    )?
    .into_samples()?;
    encode_corpus(codec, &videos)
}

/// A refinement model sharing `base`'s spatial layers and conditioners,
/// with a freshly inflated motion stack.
pub fn v2v_sibling(cfg: &PipelineConfig, base: &VideoModel) -> Result<VideoModel> {
    base.sibling(cfg.v2v_motion.clone(), derive_seed(cfg.training.init_seed, 12))
}

pub fn finetune_v2v_job(cfg: &PipelineConfig) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    let dev = Device::Cpu;
    let codec = LatentCodec::load(&cfg.checkpoints.codec, DType::F32, &dev)?;
    let base = VideoModel::load(&cfg.checkpoints.i2v, DType::F32, &dev)?;
    let videos = hires_corpus(cfg, &codec)?;
    let schedule = NoiseSchedule::linear(&cfg.schedule)?;
    let model = v2v_sibling(cfg, &base)?;
    let log = finetune_v2v_motion(&model, &schedule, &videos, &cfg.training.v2v)?;
    model.save_motion(&cfg.checkpoints.v2v)?;
    write_loss_csv(&log_path(cfg, "v2v_loss.csv"), &log)?;
    Ok(log)
}

pub fn train_vfi_job(cfg: &PipelineConfig) -> Result<Vec<VfiStepLog>> {
    cfg.validate()?;
    let t = &cfg.training;
    let triplets = make_corpus(
        CorpusKind::Triplets,
        t.triplets,
        corpus_seed(cfg, 5),
        CorpusShape {
            size: t.vfi_size,
            frames: cfg.geometry.i2v_frames.max(3),
        },
    )?
    .into_triplets()?;
    let model = VfiModel::new(cfg.vfi.clone(), derive_seed(t.init_seed, 13), DType::F32, &Device::Cpu)?;
    let log = train_vfi(&model, &triplets, &t.vfi)?;
    model.save(&cfg.checkpoints.vfi)?;
    write_loss_csv(&log_path(cfg, "vfi_loss.csv"), &log)?;
    Ok(log)
}

/// Every job in dependency order.
pub fn train_all(cfg: &PipelineConfig) -> Result<()> {
    train_codec_job(cfg)?;
    train_i2v_job(cfg)?;
    finetune_v2v_job(cfg)?;
    train_vfi_job(cfg)?;
    Ok(())
}

/// Whether every checkpoint in `cfg` exists.
pub fn checkpoints_present(cfg: &PipelineConfig) -> bool {
    cfg.required_checkpoints().iter().all(|p: &&Path| p.is_file())
}
