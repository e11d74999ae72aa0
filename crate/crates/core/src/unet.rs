//! Spatial denoiser and its inflation into a spatio-temporal denoiser.
//!
//! The spatial network is a small encoder-decoder over latent frames with
//! residual convolutions and decoupled text/appearance cross-attention at every
//! level. Inflation inserts one temporal self-attention module after every
//! block; each module's output projection starts at exactly zero, so a freshly
//! inflated network reproduces the frame-wise spatial network.
//!
//! Spatial weights are held behind an [`Arc`]: two spatio-temporal denoisers
//! built from the same `Arc<SpatialDenoiser>` share the very same variables.

use std::sync::Arc;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{group_norm, Conv2d, GroupNorm, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::conditioning::{ControlResiduals, DecoupledCrossAttention};
use crate::error::{Error, Result};
use crate::nn::{
    attention, conv3x3, from_tokens, groups_for, linear_nb, repeat_rows, sinusoidal, to_tokens, zero_linear,
    LayerNorm, ResBlock, TimeEmbedding,
};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub latent_channels: usize,
    pub widths: Vec<usize>,
    pub heads: usize,
    pub time_dim: usize,
    pub text_dim: usize,
    pub text_tokens: usize,
    pub appearance_dim: usize,
    pub appearance_tokens: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            widths: vec![32, 64, 128],
            heads: 4,
            time_dim: 128,
            text_dim: 64,
            text_tokens: 8,
            appearance_dim: 64,
            appearance_tokens: 16,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::Config("denoiser needs at least one level".into()));
        }
        if let Some(w) = self.widths.iter().find(|w| **w % self.heads != 0) {
            return Err(Error::Config(format!("width {w} not divisible by {} heads", self.heads)));
        }
        Ok(())
    }

    /// Latent side lengths must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.widths.len() - 1)
    }

    /// Channel widths at the motion-module insertion points: after each down
    /// block, after the mid block, after each up block (deepest first).
    pub fn hook_widths(&self) -> Vec<usize> {
        let mut v = self.widths.clone();
        v.push(*self.widths.last().unwrap());
        v.extend(self.widths.iter().rev());
        v
    }
}

/// Residual block followed by decoupled cross-attention.
#[derive(Debug, Clone)]
pub(crate) struct Block {
    res: ResBlock,
    xattn: DecoupledCrossAttention,
}

impl Block {
    pub(crate) fn new(cin: usize, cout: usize, cfg: &DenoiserConfig, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            res: ResBlock::new(cin, cout, cfg.time_dim, vb.pp("res"))?,
            xattn: DecoupledCrossAttention::new(cout, cfg.text_dim, cfg.appearance_dim, cfg.heads, vb.pp("xattn"))?,
        })
    }

    pub(crate) fn forward(
        &self,
        x: &Tensor,
        temb: &Tensor,
        text: &Tensor,
        appearance: Option<(&Tensor, f64)>,
    ) -> Result<Tensor> {
        let h = self.res.forward(x, temb)?;
        let (_, _, hh, ww) = h.dims4()?;
        let tokens = self.xattn.forward(&to_tokens(&h)?, text, appearance)?;
        Ok(from_tokens(&tokens, hh, ww)?)
    }
}

#[derive(Debug, Clone)]
struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        Ok(self.conv.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?)
    }
}

/// The down path shared in layout by the denoiser and the control branch.
#[derive(Debug, Clone)]
pub(crate) struct DownPath {
    pub(crate) time: TimeEmbedding,
    pub(crate) downs: Vec<Block>,
    pub(crate) downsamplers: Vec<Conv2d>,
    pub(crate) mid: Block,
}

impl DownPath {
    pub(crate) fn new(cfg: &DenoiserConfig, vb: &VarBuilder) -> Result<Self> {
        let w = &cfg.widths;
        let time = TimeEmbedding::new(w[0], cfg.time_dim, vb.pp("time"))?;
        let mut downs = Vec::new();
        let mut downsamplers = Vec::new();
        for l in 0..w.len() {
            let cin = if l == 0 { w[0] } else { w[l - 1] };
            downs.push(Block::new(cin, w[l], cfg, vb.pp(format!("down.{l}")))?);
            if l + 1 < w.len() {
                downsamplers.push(conv3x3(w[l], w[l], 2, vb.pp(format!("downsample.{l}")))?);
            }
        }
        let top = *w.last().unwrap();
        let mid = Block::new(top, top, cfg, vb.pp("mid"))?;
        Ok(Self {
            time,
            downs,
            downsamplers,
            mid,
        })
    }
}

#[derive(Debug)]
pub struct SpatialDenoiser {
    cfg: DenoiserConfig,
    params: ParamStore,
    conv_in: Conv2d,
    path: DownPath,
    ups: Vec<Block>,
    upsamplers: Vec<Upsample>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
    dtype: DType,
    device: Device,
}

/// Per-frame conditioning, already expanded to the flattened frame batch.
pub(crate) struct FrameCond<'a> {
    pub text: &'a Tensor,
    pub appearance: Option<(&'a Tensor, f64)>,
    pub control: Option<&'a [Tensor]>,
}

impl SpatialDenoiser {
    pub fn new(cfg: DenoiserConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let params = ParamStore::new(seed);
        let vb = params.builder(dtype, device);
        let w = cfg.widths.clone();
        let conv_in = conv3x3(cfg.latent_channels, w[0], 1, vb.pp("conv_in"))?;
        let path = DownPath::new(&cfg, &vb)?;
        let mut ups = Vec::new();
        let mut upsamplers = Vec::new();
        for l in 0..w.len() {
            let below = if l + 1 == w.len() { w[l] } else { w[l + 1] };
            ups.push(Block::new(below + w[l], w[l], &cfg, vb.pp(format!("up.{l}")))?);
            if l > 0 {
                upsamplers.push(Upsample {
                    conv: conv3x3(w[l], w[l], 1, vb.pp(format!("upsample.{l}")))?,
                });
            }
        }
        let norm_out = group_norm(groups_for(w[0]), w[0], 1e-5, vb.pp("norm_out"))?;
        let conv_out = conv3x3(w[0], cfg.latent_channels, 1, vb.pp("conv_out"))?;
        Ok(Self {
            cfg,
            params,
            conv_in,
            path,
            ups,
            upsamplers,
            norm_out,
            conv_out,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub(crate) fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let m = self.cfg.size_multiple();
        if c != self.cfg.latent_channels {
            return Err(Error::shape(format!("expected {} latent channels, got {c}", self.cfg.latent_channels)));
        }
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!("latent {h}x{w} not divisible by {m}")));
        }
        Ok(())
    }

    /// Frame-wise noise prediction for `x: [N, C, h, w]`.
    ///
    /// `timesteps`, `text` and the optional conditions carry one row per image.
    pub fn forward(
        &self,
        x: &Tensor,
        timesteps: &[usize],
        text: &Tensor,
        appearance: Option<(&Tensor, f64)>,
        control: Option<&ControlResiduals>,
    ) -> Result<Tensor> {
        let cond = FrameCond {
            text,
            appearance,
            control: control.map(|c| c.levels.as_slice()),
        };
        self.forward_impl(x, timesteps, &cond, None)
    }

    pub(crate) fn forward_impl(
        &self,
        x: &Tensor,
        timesteps: &[usize],
        cond: &FrameCond,
        motion: Option<(&MotionStack, usize)>,
    ) -> Result<Tensor> {
        self.check_input(x)?;
        let n = x.dim(0)?;
        if timesteps.len() != n {
            return Err(Error::shape(format!("{} timesteps for batch {n}", timesteps.len())));
        }
        let levels = self.cfg.widths.len();
        if let Some(ctl) = cond.control {
            if ctl.len() != levels + 1 {
                return Err(Error::shape(format!("{} control residuals, expected {}", ctl.len(), levels + 1)));
            }
        }
        let mut hook_idx = 0;
        let mut hook = |h: Tensor| -> Result<Tensor> {
            let out = match motion {
                Some((stack, frames)) => stack.modules[hook_idx].forward(&h, frames)?,
                None => h,
            };
            hook_idx += 1;
            Ok(out)
        };
        let add_control = |h: Tensor, i: usize| -> Result<Tensor> {
            match cond.control {
                Some(ctl) => {
                    if ctl[i].dims() != h.dims() {
                        return Err(Error::shape(format!(
                            "control residual {i} has shape {:?}, block output {:?}",
                            ctl[i].dims(),
                            h.dims()
                        )));
                    }
                    Ok((h + &ctl[i])?)
                }
                None => Ok(h),
            }
        };

        let temb = self.path.time.forward(timesteps, self.dtype, &self.device)?;
        let mut h = self.conv_in.forward(&x.to_dtype(self.dtype)?)?;
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            h = self.path.downs[l].forward(&h, &temb, cond.text, cond.appearance)?;
            h = hook(h)?;
            skips.push(add_control(h.clone(), l)?);
            if l + 1 < levels {
                h = self.path.downsamplers[l].forward(&h)?;
            }
        }
        h = self.path.mid.forward(&h, &temb, cond.text, cond.appearance)?;
        h = hook(h)?;
        h = add_control(h, levels)?;
        for l in (0..levels).rev() {
            let cat = Tensor::cat(&[&h, &skips[l]], 1)?;
            h = self.ups[l].forward(&cat, &temb, cond.text, cond.appearance)?;
            h = hook(h)?;
            if l > 0 {
                h = self.upsamplers[l - 1].forward(&h)?;
            }
        }
        let out = self.conv_out.forward(&self.norm_out.forward(&h)?.silu()?)?;
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotionConfig {
    pub max_frames: usize,
    pub heads: usize,
}

impl Default for MotionConfig {
    fn default() -> Self {
        Self {
            max_frames: 16,
            heads: 4,
        }
    }
}

/// Self-attention across the frame axis at every spatial position.
#[derive(Debug, Clone)]
pub struct TemporalAttention {
    norm: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    pos: Tensor,
    heads: usize,
}

impl TemporalAttention {
    fn new(channels: usize, max_frames: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        let positions: Vec<f64> = (0..max_frames).map(|i| i as f64).collect();
        let pos = sinusoidal(&positions, channels, 10_000.0, vb.dtype(), vb.device())?;
        Ok(Self {
            norm: LayerNorm::new(channels, vb.pp("norm"))?,
            q: linear_nb(channels, channels, vb.pp("q"))?,
            k: linear_nb(channels, channels, vb.pp("k"))?,
            v: linear_nb(channels, channels, vb.pp("v"))?,
            out: zero_linear(channels, channels, vb.pp("out"))?,
            pos,
            heads,
        })
    }

    /// Normalized, position-encoded frame tokens `[B*h*w, F, C]`.
    fn tokens(&self, x: &Tensor, frames: usize) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        let b = n / frames;
        let t = x
            .reshape((b, frames, c, h * w))?
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .reshape((b * h * w, frames, c))?;
        let pos = self.pos.narrow(0, 0, frames)?;
        Ok(self.norm.forward(&t)?.broadcast_add(&pos)?)
    }

    /// Value projection of the frame tokens, as `[B*h*w, F, C]`.
    pub fn values(&self, x: &Tensor, frames: usize) -> Result<Tensor> {
        Ok(self.v.forward(&self.tokens(x, frames)?)?)
    }

    /// Attention output before the output projection, as `[B*h*w, F, C]`.
    pub fn mixed(&self, x: &Tensor, frames: usize) -> Result<Tensor> {
        let z = self.tokens(x, frames)?;
        Ok(attention(&self.q.forward(&z)?, &self.k.forward(&z)?, &self.v.forward(&z)?, self.heads)?)
    }

    /// `x + out(attn(x))` for `x: [B*F, C, h, w]`.
    pub fn forward(&self, x: &Tensor, frames: usize) -> Result<Tensor> {
        let (n, c, h, w) = x.dims4()?;
        if frames == 0 || n % frames != 0 {
            return Err(Error::shape(format!("batch {n} is not a multiple of {frames} frames")));
        }
        let max = self.pos.dim(0)?;
        if frames > max {
            return Err(Error::TooManyFrames {
                frames,
                max_frames: max,
            });
        }
        let b = n / frames;
        let o = self.out.forward(&self.mixed(x, frames)?)?;
        let o = o
            .reshape((b, h * w, frames, c))?
            .permute((0, 2, 3, 1))?
            .contiguous()?
            .reshape((n, c, h, w))?;
        Ok((x + o)?)
    }
}

#[derive(Debug)]
pub struct MotionStack {
    cfg: MotionConfig,
    params: ParamStore,
    modules: Vec<TemporalAttention>,
}

impl MotionStack {
    pub fn new(denoiser: &DenoiserConfig, cfg: MotionConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        if cfg.max_frames < 1 {
            return Err(Error::invalid("max_frames must be at least 1"));
        }
        let params = ParamStore::new(seed);
        let vb = params.builder(dtype, device);
        let modules = denoiser
            .hook_widths()
            .into_iter()
            .enumerate()
            .map(|(i, c)| TemporalAttention::new(c, cfg.max_frames, cfg.heads, vb.pp(format!("motion.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { cfg, params, modules })
    }

    pub fn config(&self) -> &MotionConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn modules(&self) -> &[TemporalAttention] {
        &self.modules
    }
}

/// A spatial denoiser plus one temporal-attention module per block.
#[derive(Debug)]
pub struct SpatioTemporalDenoiser {
    spatial: Arc<SpatialDenoiser>,
    motion: MotionStack,
}

/// Insert zero-initialized motion modules into `spatial`. The spatial weights
/// are aliased, never copied.
pub fn inflate(spatial: &Arc<SpatialDenoiser>, cfg: MotionConfig, seed: u64) -> Result<SpatioTemporalDenoiser> {
    let motion = MotionStack::new(spatial.config(), cfg, seed, spatial.dtype(), spatial.device())?;
    Ok(SpatioTemporalDenoiser {
        spatial: spatial.clone(),
        motion,
    })
}

impl SpatioTemporalDenoiser {
    pub fn spatial(&self) -> &Arc<SpatialDenoiser> {
        &self.spatial
    }

    pub fn motion(&self) -> &MotionStack {
        &self.motion
    }

    pub fn max_frames(&self) -> usize {
        self.motion.cfg.max_frames
    }

    /// Noise prediction for a batch of videos `x: [B, F, C, h, w]`.
    ///
    /// `timesteps`, `text` (`[B, K, D]`), the appearance tokens and the
    /// control residuals all carry one row per video and are applied to
    /// every frame.
    pub fn forward(
        &self,
        x: &Tensor,
        timesteps: &[usize],
        text: &Tensor,
        appearance: Option<(&Tensor, f64)>,
        control: Option<&ControlResiduals>,
    ) -> Result<Tensor> {
        let (b, f, c, h, w) = x.dims5()?;
        if f > self.max_frames() {
            return Err(Error::TooManyFrames {
                frames: f,
                max_frames: self.max_frames(),
            });
        }
        if timesteps.len() != b || text.dim(0)? != b {
            return Err(Error::shape(format!("conditioning batch does not match {b} videos")));
        }
        let ts: Vec<usize> = timesteps.iter().flat_map(|&t| std::iter::repeat(t).take(f)).collect();
        let text = repeat_rows(text, f)?;
        let app = match appearance {
            Some((a, gate)) => Some((repeat_rows(a, f)?, gate)),
            None => None,
        };
        let ctl = match control {
            Some(c) => Some(c.broadcast_frames(f)?),
            None => None,
        };
        let cond = FrameCond {
            text: &text,
            appearance: app.as_ref().map(|(a, g)| (a, *g)),
            control: ctl.as_ref().map(|c| c.levels.as_slice()),
        };
        let flat = x.reshape((b * f, c, h, w))?;
        let out = self.spatial.forward_impl(&flat, &ts, &cond, Some((&self.motion, f)))?;
        Ok(out.reshape((b, f, c, h, w))?)
    }
}
