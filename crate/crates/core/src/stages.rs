//! The four cascade stages as compositions of the codec, the conditioned
//! video denoiser and the interpolator.

use std::path::PathBuf;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::codec::{LatentCodec, LatentGrid, VideoLatent};
use crate::conditioning::{noise_prior, NoisePriorConfig};
use crate::diffusion::{add_noise, sample, sample_from, Guidance, NoiseSchedule};
use crate::error::{Error, Result};
use crate::image::{resize_tensor, ImageRGB};
use crate::model::{RefCond, VideoModel};
use crate::rng;
use crate::vfi::{interpolate, plan, VfiModel};

/// Output sizes of every stage. Sizes are square side lengths in pixels.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageGeometry {
    pub t2i_size: usize,
    pub i2v_size: usize,
    pub i2v_frames: usize,
    pub v2v_size: usize,
    pub vfi_gap: usize,
}

impl StageGeometry {
    /// 1024² still, 600²x32 keyframes, 1048² refinement, two inserted frames per gap.
    pub fn full_scale() -> Self {
        Self {
            t2i_size: 1024,
            i2v_size: 600,
            i2v_frames: 32,
            v2v_size: 1048,
            vfi_gap: 2,
        }
    }

    /// The CPU-sized analogue: 64² still, 64²x8 keyframes, 128² refinement.
    pub fn desk() -> Self {
        Self {
            t2i_size: 64,
            i2v_size: 64,
            i2v_frames: 8,
            v2v_size: 128,
            vfi_gap: 2,
        }
    }

    pub fn validate(&self, factor: usize) -> Result<()> {
        for (name, s) in [("t2i_size", self.t2i_size), ("i2v_size", self.i2v_size), ("v2v_size", self.v2v_size)] {
            if s == 0 || s % factor != 0 {
                return Err(Error::Config(format!("{name} {s} is not a positive multiple of {factor}")));
            }
        }
        if self.i2v_frames == 0 {
            return Err(Error::Config("i2v_frames must be at least 1".into()));
        }
        if self.v2v_size < self.i2v_size {
            return Err(Error::Config("v2v_size must not be smaller than i2v_size".into()));
        }
        Ok(())
    }

    /// Frame count after interpolation.
    pub fn final_frames(&self) -> usize {
        if self.i2v_frames < 2 {
            self.i2v_frames
        } else {
            self.i2v_frames + (self.i2v_frames - 1) * self.vfi_gap
        }
    }

    /// `(stage, [frames, channels, height, width])` for every stage output.
    pub fn shape_table(&self) -> Vec<(&'static str, [usize; 4])> {
        vec![
            ("t2i", [1, 3, self.t2i_size, self.t2i_size]),
            ("i2v", [self.i2v_frames, 3, self.i2v_size, self.i2v_size]),
            ("v2v", [self.i2v_frames, 3, self.v2v_size, self.v2v_size]),
            ("vfi", [self.final_frames(), 3, self.v2v_size, self.v2v_size]),
        ]
    }
}

/// Anything that can produce the reference still.
pub trait TextToImage {
    fn generate(&self, prompt: &str, seed: u64, size: usize) -> Result<ImageRGB>;
}

/// Bypass: load the reference from a PNG, resized to the stage size.
pub struct FileT2i {
    pub path: PathBuf,
}

impl TextToImage for FileT2i {
    fn generate(&self, _prompt: &str, _seed: u64, size: usize) -> Result<ImageRGB> {
        let img = ImageRGB::load_png(&self.path)?;
        if img.height() == size && img.width() == size {
            Ok(img)
        } else {
            img.resize(size, size)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub steps: usize,
    pub guidance: f64,
    /// Clamp the per-step clean-latent estimate to `[-c, c]`.
    pub clip_x0: Option<f64>,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            steps: 25,
            guidance: 3.0,
            clip_x0: None,
        }
    }
}

/// Latent text-to-image: the video denoiser run on one frame with no reference.
pub struct LatentT2i<'a> {
    pub model: &'a VideoModel,
    pub codec: &'a LatentCodec,
    pub schedule: &'a NoiseSchedule,
    pub sampler: SamplerSettings,
}

impl TextToImage for LatentT2i<'_> {
    fn generate(&self, prompt: &str, seed: u64, size: usize) -> Result<ImageRGB> {
        let f = self.codec.factor();
        let h = size / f;
        let c = self.codec.channels();
        let init = rng::gaussian(seed, &[1, 1, c, h, h], self.model.dtype(), self.model.device())?;
        let x = sample_video(self.model, self.schedule, &init, prompt, &RefCond::NONE, &self.sampler, None)?;
        self.codec.decode(&LatentGrid {
            data: x.get(0)?.get(0)?,
            factor: f,
        })
    }
}

/// Guided deterministic sampling of `init: [1, F, C, h, w]`. With `start`
/// the loop begins from a latent already noised to that timestep.
pub fn sample_video(
    model: &VideoModel,
    schedule: &NoiseSchedule,
    init: &Tensor,
    prompt: &str,
    cond: &RefCond,
    sampler: &SamplerSettings,
    start: Option<usize>,
) -> Result<Tensor> {
    let text = model.encode_text(&[prompt])?;
    let null = model.encode_text(&[""])?;
    let guidance = Guidance {
        scale: sampler.guidance,
        cond: text,
        uncond: null,
    };
    let eps = |xt: &Tensor, t: usize, ctx: &Tensor| model.predict(xt, &[t], ctx, cond);
    match start {
        None => sample(&eps, init, schedule, &guidance, sampler.steps, sampler.clip_x0),
        Some(s) => sample_from(&eps, init, schedule, &guidance, s, sampler.steps, sampler.clip_x0),
    }
}

pub fn t2i(gen: &dyn TextToImage, prompt: &str, seed: u64, geometry: &StageGeometry) -> Result<ImageRGB> {
    if prompt.trim().is_empty() {
        return Err(Error::invalid("prompt must not be empty"));
    }
    let img = gen.generate(prompt, seed, geometry.t2i_size)?;
    if img.height() != geometry.t2i_size || img.width() != geometry.t2i_size {
        return Err(Error::shape("text-to-image output does not match the stage size"));
    }
    Ok(img)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct I2vSettings {
    pub sampler: SamplerSettings,
    pub noise_prior: NoisePriorConfig,
    /// Appearance gate.
    pub lambda: f64,
    /// Add control-branch residuals.
    pub control: bool,
}

impl Default for I2vSettings {
    fn default() -> Self {
        Self {
            sampler: SamplerSettings::default(),
            noise_prior: NoisePriorConfig::default(),
            lambda: 1.0,
            control: true,
        }
    }
}

fn reference_tensor(reference: &ImageRGB, size: usize, model: &VideoModel) -> Result<(ImageRGB, Tensor)> {
    let img = if reference.height() == size && reference.width() == size {
        reference.clone()
    } else {
        reference.resize(size, size)?
    };
    let t = img.to_tensor(model.dtype(), model.device())?.unsqueeze(0)?;
    Ok((img, t))
}

fn check_latent_side(model: &VideoModel, codec: &LatentCodec, size: usize) -> Result<usize> {
    let f = codec.factor();
    let m = model.config().denoiser.size_multiple();
    if size % f != 0 || (size / f) % m != 0 {
        return Err(Error::shape(format!("size {size} needs to be a multiple of {}", f * m)));
    }
    Ok(size / f)
}

/// Animate `reference`: noise-prior initialization around its latent, then
/// guided sampling with appearance and control conditioning.
#[allow(clippy::too_many_arguments)]
pub fn i2v(
    model: &VideoModel,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    reference: &ImageRGB,
    prompt: &str,
    seed: u64,
    geometry: &StageGeometry,
    settings: &I2vSettings,
) -> Result<VideoLatent> {
    check_latent_side(model, codec, geometry.i2v_size)?;
    if geometry.i2v_frames > model.denoiser().max_frames() {
        return Err(Error::TooManyFrames {
            frames: geometry.i2v_frames,
            max_frames: model.denoiser().max_frames(),
        });
    }
    let (ref_img, ref_t) = reference_tensor(reference, geometry.i2v_size, model)?;
    let z_ref = codec.encode(&ref_img)?;
    let init = noise_prior(&z_ref, geometry.i2v_frames, &settings.noise_prior, seed)?;
    let cond = RefCond {
        reference: Some(&ref_t),
        lambda: settings.lambda,
        control: settings.control,
    };
    let x = sample_video(model, schedule, &init.data.unsqueeze(0)?, prompt, &cond, &settings.sampler, None)?;
    VideoLatent::new(x.squeeze(0)?, 0.0)
}

/// Sampling with every reference condition off, from plain Gaussian noise.
pub fn unconditioned_video(
    model: &VideoModel,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    prompt: &str,
    seed: u64,
    geometry: &StageGeometry,
    sampler: &SamplerSettings,
) -> Result<VideoLatent> {
    let h = check_latent_side(model, codec, geometry.i2v_size)?;
    let c = codec.channels();
    let init = rng::gaussian(seed, &[1, geometry.i2v_frames, c, h, h], model.dtype(), model.device())?;
    let x = sample_video(model, schedule, &init, prompt, &RefCond::NONE, sampler, None)?;
    VideoLatent::new(x.squeeze(0)?, 0.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct V2vSettings {
    pub sampler: SamplerSettings,
    /// Fraction of the schedule the upscaled latents are re-noised to.
    pub strength: f64,
    pub lambda: f64,
    pub control: bool,
}

impl Default for V2vSettings {
    fn default() -> Self {
        Self {
            sampler: SamplerSettings {
                steps: 10,
                ..Default::default()
            },
            strength: 0.5,
            lambda: 1.0,
            control: true,
        }
    }
}

/// Upscale keyframes to `v2v_size` and refine them. With zero sampler
/// steps this is a plain bilinear upsample in pixel space.
#[allow(clippy::too_many_arguments)]
pub fn v2v(
    model: &VideoModel,
    codec: &LatentCodec,
    schedule: &NoiseSchedule,
    keyframes: &[ImageRGB],
    reference: &ImageRGB,
    prompt: &str,
    seed: u64,
    geometry: &StageGeometry,
    settings: &V2vSettings,
) -> Result<Vec<ImageRGB>> {
    if keyframes.is_empty() {
        return Err(Error::invalid("no keyframes to refine"));
    }
    let size = geometry.v2v_size;
    if size % codec.factor() != 0 {
        return Err(Error::shape(format!("v2v size {size} not divisible by codec factor {}", codec.factor())));
    }
    if settings.sampler.steps == 0 {
        return keyframes.iter().map(|k| k.resize(size, size)).collect();
    }
    if !(settings.strength > 0.0 && settings.strength <= 1.0) {
        return Err(Error::Config(format!("v2v strength {} outside (0, 1]", settings.strength)));
    }
    let h = check_latent_side(model, codec, size)?;
    let low = codec.encode_video(keyframes, 0.0)?;
    let up = resize_tensor(&low.data.to_dtype(DType::F32)?, h, h)?.to_dtype(model.dtype())?;
    let start = ((schedule.num_steps() - 1) as f64 * settings.strength).round() as usize;
    let eps = rng::gaussian(seed, up.dims(), model.dtype(), model.device())?;
    let noised = add_noise(schedule, &up, start, &eps)?.unsqueeze(0)?;
    let (_, ref_t) = reference_tensor(reference, size, model)?;
    let cond = RefCond {
        reference: Some(&ref_t),
        lambda: settings.lambda,
        control: settings.control,
    };
    let steps = settings.sampler.steps.min(start + 1);
    let sampler = SamplerSettings {
        steps,
        ..settings.sampler.clone()
    };
    let x = sample_video(model, schedule, &noised, prompt, &cond, &sampler, Some(start))?;
    codec.decode_video(&VideoLatent::new(x.squeeze(0)?, 0.0)?)
}

pub fn run_vfi_stage(model: &VfiModel, frames: &[ImageRGB], geometry: &StageGeometry) -> Result<Vec<ImageRGB>> {
    if frames.len() < 2 {
        return Ok(frames.to_vec());
    }
    interpolate(model, frames, &plan(frames.len(), geometry.vfi_gap)?)
}
