//! Training loops: codec reconstruction, joint image/video noise
//! prediction for the image-to-video model, and motion-only finetuning for
//! the video-to-video model.

use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::LatentCodec;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::model::{RefCond, VideoModel};
use crate::optim::{Adam, OptimConfig};
use crate::rng;
use crate::synthetic::Sample;

/// One optimizer step. `frames` is 1 for image batches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub frames: usize,
    pub kind: String,
    pub grad_norm: f64,
}

pub fn write_loss_csv<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Relative drop from the mean of the first `head` losses to the mean of
/// the last `tail` losses; positive means the loss went down.
pub fn loss_drop(losses: &[f64], head: usize, tail: usize) -> f64 {
    if losses.len() < head.max(tail) || head == 0 || tail == 0 {
        return f64::NAN;
    }
    let first = losses[..head].iter().sum::<f64>() / head as f64;
    let last = losses[losses.len() - tail..].iter().sum::<f64>() / tail as f64;
    1.0 - last / first
}

/// Mean squared error between a noise prediction and the true noise.
pub fn noise_loss(pred: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if pred.shape() != eps.shape() {
        return Err(Error::shape(format!("prediction {:?} vs noise {:?}", pred.dims(), eps.dims())));
    }
    Ok((pred - eps)?.sqr()?.mean_all()?)
}

fn stack_images(images: &[&ImageRGB], codec: &LatentCodec) -> Result<Tensor> {
    let ts = images
        .iter()
        .map(|i| i.to_tensor(codec.dtype(), codec.device()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 4,
            seed: 0,
            optim: OptimConfig {
                lr: 2e-3,
                clip_norm: 1.0,
                final_lr_ratio: 0.1,
            },
        }
    }
}

/// Train the autoencoder on pixel MSE, then fit its latent scale.
pub fn train_codec(codec: &mut LatentCodec, images: &[ImageRGB], cfg: &CodecTrainConfig) -> Result<Vec<LossRecord>> {
    if images.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut opt = Adam::new(codec.params().vars(), &cfg.optim)?;
    let mut r = rng::rng(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<&ImageRGB> = (0..cfg.batch.max(1)).map(|_| &images[r.random_range(0..images.len())]).collect();
        let x = stack_images(&batch, codec)?;
        let recon = codec.decode_raw(&codec.encode_raw(&x)?)?;
        let loss = (recon - &x)?.sqr()?.mean_all()?;
        let value = scalar(&loss)?;
        opt.schedule(step, cfg.steps);
        let grad_norm = opt.backward_step(&loss)?;
        log::debug!("codec step {step}: {value:.5}");
        log.push(LossRecord {
            step,
            loss: value,
            frames: 1,
            kind: "codec".into(),
            grad_norm,
        });
    }
    let fit: Vec<&ImageRGB> = images.iter().take(64).collect();
    codec.fit_latent_scale(&stack_images(&fit, codec)?)?;
    Ok(log)
}

/// A clip (or still) with pre-computed latents.
#[derive(Clone, Debug)]
pub struct EncodedClip {
    /// `[F, C, h, w]`.
    pub latents: Tensor,
    /// First frame, `[3, H, W]`.
    pub reference: Tensor,
    pub caption: String,
}

pub fn encode_corpus(codec: &LatentCodec, samples: &[Sample]) -> Result<Vec<EncodedClip>> {
    samples
        .iter()
        .map(|s| {
            let frames = stack_images(&s.frames.iter().collect::<Vec<_>>(), codec)?;
            Ok(EncodedClip {
                latents: codec.encode_batch(&frames)?.detach(),
                reference: frames.get(0)?,
                caption: s.caption.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JointTrainConfig {
    pub steps: usize,
    /// Probability that a step draws a batch of stills (packed as 1-frame videos).
    pub mix_ratio: f64,
    pub image_batch: usize,
    pub video_batch: usize,
    /// Probability of replacing the prompts of a batch with the empty prompt.
    pub text_dropout: f64,
    /// Probability of training a batch without its reference image.
    pub reference_dropout: f64,
    /// Appearance gate used while training.
    pub lambda: f64,
    /// Highest timestep drawn; `None` means the whole schedule.
    pub max_timestep: Option<usize>,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for JointTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            mix_ratio: 0.5,
            image_batch: 8,
            video_batch: 2,
            text_dropout: 0.1,
            reference_dropout: 0.1,
            lambda: 1.0,
            max_timestep: None,
            seed: 0,
            optim: OptimConfig {
                lr: 1e-3,
                clip_norm: 1.0,
                final_lr_ratio: 1.0,
            },
        }
    }
}

impl JointTrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("mix_ratio", self.mix_ratio),
            ("text_dropout", self.text_dropout),
            ("reference_dropout", self.reference_dropout),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} {p} outside [0, 1]")));
            }
        }
        if self.image_batch == 0 || self.video_batch == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// A sampled minibatch: latents `[B, F, C, h, w]`, references, prompts.
pub struct Batch {
    pub x0: Tensor,
    pub reference: Option<Tensor>,
    pub prompts: Vec<String>,
}

fn draw_batch(r: &mut ChaCha8Rng, pool: &[EncodedClip], size: usize, cfg: &JointTrainConfig) -> Result<Batch> {
    let idx: Vec<usize> = (0..size).map(|_| r.random_range(0..pool.len())).collect();
    let frames = pool[idx[0]].latents.dim(0)?;
    if idx.iter().any(|&i| pool[i].latents.dim(0).ok() != Some(frames)) {
        return Err(Error::shape("clips in a corpus must have equal frame counts"));
    }
    let x0 = Tensor::stack(&idx.iter().map(|&i| pool[i].latents.clone()).collect::<Vec<_>>(), 0)?;
    let drop_text = r.random_bool(cfg.text_dropout);
    let drop_ref = r.random_bool(cfg.reference_dropout);
    let prompts = idx
        .iter()
        .map(|&i| if drop_text { String::new() } else { pool[i].caption.clone() })
        .collect();
    let reference = if drop_ref {
        None
    } else {
        Some(Tensor::stack(&idx.iter().map(|&i| pool[i].reference.clone()).collect::<Vec<_>>(), 0)?)
    };
    Ok(Batch { x0, reference, prompts })
}

/// Noise-prediction loss of `model` on one batch at random timesteps.
pub fn batch_loss(
    model: &VideoModel,
    schedule: &NoiseSchedule,
    batch: &Batch,
    lambda: f64,
    max_timestep: Option<usize>,
    r: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let (b, f, c, h, w) = batch.x0.dims5()?;
    let top = max_timestep.unwrap_or(schedule.num_steps() - 1).min(schedule.num_steps() - 1);
    let ts: Vec<usize> = (0..b).map(|_| r.random_range(0..=top)).collect();
    let dtype = model.dtype();
    let eps = rng::gaussian_from(r, &[b, f, c, h, w], dtype, model.device())?;
    let mut a = Vec::with_capacity(b);
    let mut s = Vec::with_capacity(b);
    for &t in &ts {
        let ab = schedule.alpha_bar(t)?;
        a.push(ab.sqrt());
        s.push((1.0 - ab).sqrt());
    }
    let col = |v: Vec<f64>| -> Result<Tensor> {
        Ok(Tensor::from_vec(v, (b, 1, 1, 1, 1), model.device())?.to_dtype(dtype)?)
    };
    let x0 = batch.x0.to_dtype(dtype)?;
    let xt = (x0.broadcast_mul(&col(a)?)? + eps.broadcast_mul(&col(s)?)?)?;
    let text = model.encode_text(&batch.prompts)?;
    let cond = RefCond {
        reference: batch.reference.as_ref(),
        lambda,
        control: batch.reference.is_some(),
    };
    let pred = model.predict(&xt, &ts, &text, &cond)?;
    noise_loss(&pred, &eps)
}

/// Train every parameter of `model` on stills and clips. Each step draws a
/// still batch with probability `mix_ratio` (packed as `F = 1` videos),
/// otherwise a clip batch.
pub fn joint_train(
    model: &VideoModel,
    schedule: &NoiseSchedule,
    images: &[EncodedClip],
    videos: &[EncodedClip],
    cfg: &JointTrainConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if (cfg.mix_ratio > 0.0 && images.is_empty()) || (cfg.mix_ratio < 1.0 && videos.is_empty()) {
        return Err(Error::EmptyCorpus);
    }
    let mut vars = model.spatial().params().vars();
    vars.extend(model.conditioners().params().vars());
    vars.extend(model.motion_params().vars());
    let mut opt = Adam::new(vars, &cfg.optim)?;
    let mut r = rng::rng(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let image_step = r.random_bool(cfg.mix_ratio);
        let batch = if image_step {
            let mut b = draw_batch(&mut r, images, cfg.image_batch, cfg)?;
            b.x0 = b.x0.narrow(1, 0, 1)?;
            b
        } else {
            draw_batch(&mut r, videos, cfg.video_batch, cfg)?
        };
        let frames = batch.x0.dim(1)?;
        let loss = batch_loss(model, schedule, &batch, cfg.lambda, cfg.max_timestep, &mut r)?;
        let value = scalar(&loss)?;
        opt.schedule(step, cfg.steps);
        let grad_norm = opt.backward_step(&loss)?;
        log::debug!("joint step {step}: F={frames} loss {value:.5}");
        log.push(LossRecord {
            step,
            loss: value,
            frames,
            kind: if image_step { "image" } else { "video" }.into(),
            grad_norm,
        });
    }
    Ok(log)
}

/// Train only the motion stack of `model`; spatial layers and conditioning
/// modules are left untouched.
pub fn finetune_v2v_motion(
    model: &VideoModel,
    schedule: &NoiseSchedule,
    videos: &[EncodedClip],
    cfg: &JointTrainConfig,
) -> Result<Vec<LossRecord>> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut opt = Adam::new(model.motion_params().vars(), &cfg.optim)?;
    let mut r = rng::rng(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = draw_batch(&mut r, videos, cfg.video_batch, cfg)?;
        let frames = batch.x0.dim(1)?;
        let loss = batch_loss(model, schedule, &batch, cfg.lambda, cfg.max_timestep, &mut r)?;
        let value = scalar(&loss)?;
        opt.schedule(step, cfg.steps);
        let grad_norm = opt.backward_step(&loss)?;
        log::debug!("v2v step {step}: loss {value:.5}");
        log.push(LossRecord {
            step,
            loss: value,
            frames,
            kind: "video".into(),
            grad_norm,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_prediction_has_zero_loss() {
        let eps = rng::gaussian(3, &[2, 3, 4, 4, 4], DType::F32, &candle_core::Device::Cpu).unwrap();
        assert_eq!(scalar(&noise_loss(&eps, &eps).unwrap()).unwrap(), 0.0);
    }

    #[test]
    fn loss_drop_windows() {
        let l: Vec<f64> = (0..100).map(|i| if i < 10 { 2.0 } else { 1.0 }).collect();
        assert!((loss_drop(&l, 10, 50) - 0.5).abs() < 1e-12);
        assert!(loss_drop(&l[..5], 10, 50).is_nan());
    }

    #[test]
    fn bad_mix_ratio() {
        let cfg = JointTrainConfig {
            mix_ratio: 1.5,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }
}
