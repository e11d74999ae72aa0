//! Reference-image conditioning: the appearance encoder and its decoupled
//! cross-attention path, the latent noise prior, and the zero-initialized
//! control branch.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Conv2d, Init, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::codec::{LatentGrid, VideoLatent};
use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::nn::{attention, conv3x3, linear_nb, repeat_rows, to_tokens, zero_conv1x1, LayerNorm};
use crate::params::ParamStore;
use crate::rng;
use crate::unet::{DenoiserConfig, DownPath, SpatialDenoiser};


fn linear_zero_bias(cin: usize, cout: usize, vb: VarBuilder) -> candle_core::Result<Linear> {
    let bound = 1.0 / (cin as f64).sqrt();
    let w = vb.get_with_hints((cout, cin), "weight", Init::Uniform { lo: -bound, up: bound })?;
    let b = vb.get_with_hints(cout, "bias", Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

/// `hidden + Attn(hidden, text) + gate * Attn(hidden, appearance)`, where
/// the two attention paths share the query and output projections but have
/// separate key/value projections.
#[derive(Debug, Clone)]
pub struct DecoupledCrossAttention {
    norm: LayerNorm,
    q: Linear,
    k_text: Linear,
    v_text: Linear,
    k_app: Linear,
    v_app: Linear,
    out: Linear,
    heads: usize,
    text_dim: usize,
    app_dim: usize,
}

impl DecoupledCrossAttention {
    pub fn new(channels: usize, text_dim: usize, app_dim: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            norm: LayerNorm::new(channels, vb.pp("norm"))?,
            q: linear_nb(channels, channels, vb.pp("q"))?,
            k_text: linear_nb(text_dim, channels, vb.pp("k_text"))?,
            v_text: linear_zero_bias(text_dim, channels, vb.pp("v_text"))?,
            k_app: linear_nb(app_dim, channels, vb.pp("k_app"))?,
            v_app: linear_zero_bias(app_dim, channels, vb.pp("v_app"))?,
            out: linear_nb(channels, channels, vb.pp("out"))?,
            heads,
            text_dim,
            app_dim,
        })
    }

    /// Appearance attention term `out(Attn(q, K_app a, V_app a))` alone.
    pub fn appearance_term(&self, hidden: &Tensor, app: &Tensor) -> Result<Tensor> {
        let q = self.q.forward(&self.norm.forward(hidden)?)?;
        self.path(&q, app, &self.k_app, &self.v_app, self.app_dim, "appearance")
    }

    fn path(&self, q: &Tensor, ctx: &Tensor, k: &Linear, v: &Linear, dim: usize, what: &str) -> Result<Tensor> {
        let (n, _, d) = ctx.dims3()?;
        if d != dim {
            return Err(Error::shape(format!("{what} context width {d}, expected {dim}")));
        }
        if n != q.dim(0)? {
            return Err(Error::shape(format!("{what} context batch {n} vs hidden batch {}", q.dim(0)?)));
        }
        let a = attention(q, &k.forward(ctx)?, &v.forward(ctx)?, self.heads)?;
        Ok(self.out.forward(&a)?)
    }

    /// `hidden: [N, L, C]`, `text: [N, K, Dt]`, appearance `[N, Ka, Da]` with gate.
    pub fn forward(&self, hidden: &Tensor, text: &Tensor, appearance: Option<(&Tensor, f64)>) -> Result<Tensor> {
        let q = self.q.forward(&self.norm.forward(hidden)?)?;
        let text_term = self.path(&q, text, &self.k_text, &self.v_text, self.text_dim, "text")?;
        let h = (hidden + text_term)?;
        match appearance {
            None => Ok(h),
            Some((app, gate)) => {
                if !(gate >= 0.0 && gate.is_finite()) {
                    return Err(Error::invalid(format!("appearance gate {gate} must be >= 0")));
                }
                if gate == 0.0 {
                    return Ok(h);
                }
                let a = self.path(&q, app, &self.k_app, &self.v_app, self.app_dim, "appearance")?;
                Ok((h + a.affine(gate, 0.0)?)?)
            }
        }
    }

    pub fn v_app_bias(&self) -> Option<&Tensor> {
        self.v_app.bias()
    }
}

/// Appearance tokens for one batch of references: `[B, K_app, D]`.
#[derive(Clone, Debug)]
pub struct ReferenceEmbedding {
    pub tokens: Tensor,
    pub source: Option<String>,
}

/// Convolutional pyramid followed by cross-attention pooling into a fixed
/// set of learned query tokens.
#[derive(Debug)]
pub struct AppearanceEncoder {
    convs: Vec<Conv2d>,
    feat_norm: LayerNorm,
    queries: Tensor,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    out_norm: LayerNorm,
    heads: usize,
    factor: usize,
}

impl AppearanceEncoder {
    pub fn new(tokens: usize, dim: usize, heads: usize, factor: usize, vb: VarBuilder) -> Result<Self> {
        let levels = factor.trailing_zeros() as usize;
        let mut convs = Vec::new();
        let mut cin = 3;
        for l in 0..levels {
            let cout = if l + 1 == levels { dim } else { (dim >> (levels - 1 - l)).max(8) };
            convs.push(conv3x3(cin, cout, 2, vb.pp(format!("conv.{l}")))?);
            cin = cout;
        }
        Ok(Self {
            convs,
            feat_norm: LayerNorm::new(dim, vb.pp("feat_norm"))?,
            queries: vb.get_with_hints((tokens, dim), "queries", Init::Randn { mean: 0.0, stdev: 1.0 })?,
            q: linear_nb(dim, dim, vb.pp("q"))?,
            k: linear_nb(dim, dim, vb.pp("k"))?,
            v: linear_nb(dim, dim, vb.pp("v"))?,
            out: linear_nb(dim, dim, vb.pp("out"))?,
            out_norm: LayerNorm::new(dim, vb.pp("out_norm"))?,
            heads,
            factor,
        })
    }

    /// `reference: [B, 3, H, W]` -> `[B, K_app, D]`.
    pub fn forward(&self, reference: &Tensor) -> Result<Tensor> {
        let (b, _, h, w) = reference.dims4()?;
        if h % self.factor != 0 || w % self.factor != 0 {
            return Err(Error::shape(format!("reference {h}x{w} not divisible by {}", self.factor)));
        }
        let mut x = reference.clone();
        for (i, c) in self.convs.iter().enumerate() {
            x = c.forward(&x)?;
            if i + 1 < self.convs.len() {
                x = x.silu()?;
            }
        }
        let feats = self.feat_norm.forward(&to_tokens(&x)?)?;
        let (kq, d) = self.queries.dims2()?;
        let queries = self.queries.unsqueeze(0)?.broadcast_as((b, kq, d))?.contiguous()?;
        let a = attention(
            &self.q.forward(&queries)?,
            &self.k.forward(&feats)?,
            &self.v.forward(&feats)?,
            self.heads,
        )?;
        Ok(self.out_norm.forward(&(queries + self.out.forward(&a)?)?)?)
    }

    pub fn encode(&self, reference: &ImageRGB) -> Result<ReferenceEmbedding> {
        let dtype = self.queries.dtype();
        let x = reference.to_tensor(dtype, self.queries.device())?.unsqueeze(0)?;
        Ok(ReferenceEmbedding {
            tokens: self.forward(&x)?.squeeze(0)?,
            source: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoisePriorConfig {
    /// Mean shift toward the reference latent, in [0, 1].
    pub alpha: f64,
    /// Apply the shift to every frame (true) or to the first frame only.
    pub shared_across_frames: bool,
    /// Draw one noise sample and reuse it for all frames.
    pub share_epsilon: bool,
}

impl Default for NoisePriorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            shared_across_frames: true,
            share_epsilon: false,
        }
    }
}

impl NoisePriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!("noise prior alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

/// Standard Gaussian noise for `frames` latent frames shaped like `z_ref`,
/// drawn from `seed` in frame-major order.
pub fn frame_noise(z_ref: &Tensor, frames: usize, share_epsilon: bool, seed: u64) -> Result<Tensor> {
    let (c, h, w) = z_ref.dims3()?;
    if share_epsilon {
        let e = rng::gaussian(seed, &[1, c, h, w], z_ref.dtype(), z_ref.device())?;
        Ok(repeat_rows(&e, frames)?)
    } else {
        rng::gaussian(seed, &[frames, c, h, w], z_ref.dtype(), z_ref.device())
    }
}

/// Starting latents whose per-frame mean is shifted by `alpha * z_ref`:
/// frame i is `eps_i + alpha * z_ref` with unit-variance `eps_i`.
pub fn noise_prior(z_ref: &LatentGrid, frames: usize, cfg: &NoisePriorConfig, seed: u64) -> Result<VideoLatent> {
    cfg.validate()?;
    if frames == 0 {
        return Err(Error::invalid("noise prior needs at least one frame"));
    }
    let eps = frame_noise(&z_ref.data, frames, cfg.share_epsilon, seed)?;
    if cfg.alpha == 0.0 {
        return VideoLatent::new(eps, 0.0);
    }
    let shift = z_ref.data.affine(cfg.alpha, 0.0)?.unsqueeze(0)?;
    let shift = if cfg.shared_across_frames || frames == 1 {
        repeat_rows(&shift, frames)?
    } else {
        let rest = shift.zeros_like()?.broadcast_as((frames - 1, shift.dim(1)?, shift.dim(2)?, shift.dim(3)?))?;
        Tensor::cat(&[&shift, &rest.contiguous()?], 0)?
    };
    VideoLatent::new((eps + shift)?, 0.0)
}

/// Residuals for the denoiser's skip connections (one per level) and mid block.
#[derive(Clone, Debug)]
pub struct ControlResiduals {
    pub levels: Vec<Tensor>,
}

impl ControlResiduals {
    /// Repeat each per-video residual across `frames` frames: `[B, ...]` -> `[B*F, ...]`.
    pub fn broadcast_frames(&self, frames: usize) -> Result<ControlResiduals> {
        Ok(ControlResiduals {
            levels: self
                .levels
                .iter()
                .map(|t| repeat_rows(t, frames))
                .collect::<candle_core::Result<_>>()?,
        })
    }

    pub fn max_abs(&self) -> Result<f64> {
        let mut m = 0f64;
        for t in &self.levels {
            m = m.max(t.abs()?.max_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?);
        }
        Ok(m)
    }

    pub fn l2_norms(&self) -> Result<Vec<f64>> {
        self.levels
            .iter()
            .map(|t| Ok(t.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?.sqrt()))
            .collect()
    }
}

/// Copy of the denoiser's down path fed by the raw reference RGB, with a
/// zero-initialized 1x1 output convolution per residual.
#[derive(Debug)]
pub struct ControlBranch {
    hint: Vec<Conv2d>,
    path: DownPath,
    zero: Vec<Conv2d>,
    factor: usize,
    dtype: DType,
    device: Device,
}

impl ControlBranch {
    /// Create the branch's variables in `params` under `prefix` and
    /// initialize its down path from the weights of `spatial`.
    pub fn new(spatial: &SpatialDenoiser, codec_factor: usize, params: &ParamStore, prefix: &str) -> Result<Self> {
        let cfg: &DenoiserConfig = spatial.config();
        let vb = params.builder(spatial.dtype(), spatial.device()).pp(prefix);
        let w = &cfg.widths;
        let levels = codec_factor.trailing_zeros() as usize;
        let mut hint = Vec::new();
        let mut cin = 3;
        for l in 0..=levels {
            let stride = if l == 0 { 1 } else { 2 };
            let cout = if l == levels { w[0] } else { (w[0] / 2).max(8) };
            hint.push(conv3x3(cin, cout, stride, vb.pp(format!("hint.{l}")))?);
            cin = cout;
        }
        let path = DownPath::new(cfg, &vb)?;
        let mut zero = Vec::new();
        for (i, c) in w.iter().chain(std::iter::once(w.last().unwrap())).enumerate() {
            zero.push(zero_conv1x1(*c, *c, vb.pp(format!("zero.{i}")))?);
        }
        for part in ["time.", "down.", "downsample.", "mid."] {
            params.copy_from(spatial.params(), part, &format!("{prefix}.{part}"))?;
        }
        Ok(Self {
            hint,
            path,
            zero,
            factor: codec_factor,
            dtype: spatial.dtype(),
            device: spatial.device().clone(),
        })
    }

    /// `reference: [B, 3, H, W]` at the stage resolution.
    pub fn forward(&self, reference: &Tensor, timesteps: &[usize], text: &Tensor) -> Result<ControlResiduals> {
        let (b, c, h, w) = reference.dims4()?;
        if c != 3 {
            return Err(Error::shape("control reference must be RGB"));
        }
        let m = self.factor << (self.path.downs.len() - 1);
        if h % m != 0 || w % m != 0 {
            return Err(Error::shape(format!("reference {h}x{w} not divisible by {m}")));
        }
        if timesteps.len() != b {
            return Err(Error::shape("one timestep per reference required"));
        }
        let mut x = reference.to_dtype(self.dtype)?;
        for (i, conv) in self.hint.iter().enumerate() {
            x = conv.forward(&x)?;
            if i + 1 < self.hint.len() {
                x = x.silu()?;
            }
        }
        let temb = self.path.time.forward(timesteps, self.dtype, &self.device)?;
        let levels = self.path.downs.len();
        let mut out = Vec::with_capacity(levels + 1);
        let mut h = x;
        for l in 0..levels {
            h = self.path.downs[l].forward(&h, &temb, text, None)?;
            out.push(self.zero[l].forward(&h)?);
            if l + 1 < levels {
                h = self.path.downsamplers[l].forward(&h)?;
            }
        }
        h = self.path.mid.forward(&h, &temb, text, None)?;
        out.push(self.zero[levels].forward(&h)?);
        Ok(ControlResiduals { levels: out })
    }

    pub fn residuals_for(&self, reference: &ImageRGB, t: usize, text: &Tensor) -> Result<ControlResiduals> {
        let x = reference.to_tensor(self.dtype, &self.device)?.unsqueeze(0)?;
        self.forward(&x, &[t], text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian;

    fn xattn(seed: u64) -> DecoupledCrossAttention {
        let ps = ParamStore::new(seed);
        DecoupledCrossAttention::new(16, 8, 12, 4, ps.builder(DType::F32, &Device::Cpu)).unwrap()
    }

    fn vals(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn gate_zero_matches_text_only() {
        let dev = Device::Cpu;
        let a = xattn(0);
        let h = gaussian(1, &[2, 10, 16], DType::F32, &dev).unwrap();
        let t = gaussian(2, &[2, 4, 8], DType::F32, &dev).unwrap();
        let app = gaussian(3, &[2, 5, 12], DType::F32, &dev).unwrap();
        let text_only = a.forward(&h, &t, None).unwrap();
        let gated = a.forward(&h, &t, Some((&app, 0.0))).unwrap();
        assert_eq!(vals(&text_only), vals(&gated));
        assert!(a.forward(&h, &t, Some((&app, -1.0))).is_err());
    }

    #[test]
    fn zero_appearance_context_is_a_no_op() {
        let dev = Device::Cpu;
        let a = xattn(0);
        let bias = a.v_app_bias().unwrap();
        assert_eq!(bias.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap(), 0.0);
        let h = gaussian(1, &[2, 10, 16], DType::F32, &dev).unwrap();
        let t = gaussian(2, &[2, 4, 8], DType::F32, &dev).unwrap();
        let zeros = Tensor::zeros((2, 5, 12), DType::F32, &dev).unwrap();
        let text_only = a.forward(&h, &t, None).unwrap();
        for gate in [0.5, 1.0, 3.0] {
            assert_eq!(vals(&text_only), vals(&a.forward(&h, &t, Some((&zeros, gate))).unwrap()));
        }
    }

    #[test]
    fn output_is_affine_in_gate() {
        let dev = Device::Cpu;
        let a = xattn(4);
        let h = gaussian(1, &[2, 10, 16], DType::F32, &dev).unwrap();
        let t = gaussian(2, &[2, 4, 8], DType::F32, &dev).unwrap();
        let app = gaussian(3, &[2, 5, 12], DType::F32, &dev).unwrap();
        let y1 = a.forward(&h, &t, Some((&app, 1.0))).unwrap();
        let y2 = a.forward(&h, &t, Some((&app, 2.0))).unwrap();
        let term = a.appearance_term(&h, &app).unwrap();
        let diff = ((y2 - y1).unwrap() - term).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() < 1e-5);
    }

    #[test]
    fn context_width_mismatch() {
        let dev = Device::Cpu;
        let a = xattn(0);
        let h = gaussian(1, &[2, 10, 16], DType::F32, &dev).unwrap();
        let bad = gaussian(2, &[2, 4, 9], DType::F32, &dev).unwrap();
        assert!(matches!(a.forward(&h, &bad, None), Err(Error::Shape(_))));
    }

    #[test]
    fn noise_prior_rejects_bad_alpha_and_frames() {
        let z = LatentGrid {
            data: Tensor::zeros((4, 2, 2), DType::F32, &Device::Cpu).unwrap(),
            factor: 8,
        };
        let cfg = NoisePriorConfig {
            alpha: 1.5,
            ..Default::default()
        };
        assert!(noise_prior(&z, 4, &cfg, 0).is_err());
        assert!(noise_prior(&z, 0, &NoisePriorConfig::default(), 0).is_err());
    }

    #[test]
    fn noise_prior_alpha_zero_is_plain_noise() {
        let dev = Device::Cpu;
        let z = LatentGrid {
            data: gaussian(9, &[4, 3, 3], DType::F32, &dev).unwrap(),
            factor: 8,
        };
        let cfg = NoisePriorConfig {
            alpha: 0.0,
            ..Default::default()
        };
        let v = noise_prior(&z, 5, &cfg, 77).unwrap();
        let plain = frame_noise(&z.data, 5, false, 77).unwrap();
        assert_eq!(vals(&v.data), vals(&plain));
    }

    #[test]
    fn shared_epsilon_repeats_noise() {
        let dev = Device::Cpu;
        let z = LatentGrid {
            data: gaussian(9, &[4, 3, 3], DType::F32, &dev).unwrap(),
            factor: 8,
        };
        let cfg = NoisePriorConfig {
            share_epsilon: true,
            ..Default::default()
        };
        let v = noise_prior(&z, 3, &cfg, 5).unwrap();
        assert_eq!(vals(&v.data.get(0).unwrap()), vals(&v.data.get(2).unwrap()));
    }
}
