//! Convolutional autoencoder between RGB frames and the diffusion latent space.

use std::path::Path;

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{conv2d, Conv2d, Conv2dConfig, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::params::{header_field, load_checkpoint, save_checkpoint, Header, ParamStore};

pub const CODEC_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CodecConfig {
    /// Spatial downsample factor; a power of two.
    pub factor: usize,
    pub channels: usize,
    /// Feature widths per level, finest first; `log2(factor)` entries.
    pub widths: Vec<usize>,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            factor: 8,
            channels: 4,
            widths: vec![16, 32, 64],
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.factor.is_power_of_two() || self.factor < 2 {
            return Err(Error::Config(format!("codec factor {} is not a power of two >= 2", self.factor)));
        }
        let levels = self.factor.trailing_zeros() as usize;
        if self.widths.len() != levels {
            return Err(Error::Config(format!(
                "codec factor {} needs {levels} widths, got {}",
                self.factor,
                self.widths.len()
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("codec needs at least one latent channel".into()));
        }
        Ok(())
    }
}

/// Latent of one image: `[C, H/f, W/f]`.
#[derive(Clone, Debug)]
pub struct LatentGrid {
    pub data: Tensor,
    pub factor: usize,
}

impl LatentGrid {
    pub fn dims(&self) -> (usize, usize, usize) {
        self.data.dims3().expect("latent grid is rank 3")
    }
}

/// Per-frame latents `[F, C, h, w]`.
#[derive(Clone, Debug)]
pub struct VideoLatent {
    pub data: Tensor,
    pub frame_rate: f64,
}

impl VideoLatent {
    pub fn new(data: Tensor, frame_rate: f64) -> Result<Self> {
        let (f, _, _, _) = data.dims4()?;
        if f == 0 {
            return Err(Error::shape("video latent needs at least one frame"));
        }
        Ok(Self { data, frame_rate })
    }

    pub fn frames(&self) -> usize {
        self.data.dim(0).expect("rank 4")
    }

    pub fn frame(&self, i: usize) -> Result<LatentGrid> {
        Ok(LatentGrid {
            data: self.data.get(i)?,
            factor: 0,
        })
    }
}

#[derive(Debug)]
struct Encoder {
    conv_in: Conv3,
    downs: Vec<Conv3>,
    conv_out: Conv3,
}

#[derive(Debug)]
struct Decoder {
    conv_in: Conv3,
    ups: Vec<Conv3>,
    conv_out: Conv3,
}

/// 3x3 convolution over an edge-replicated border, so flat regions stay
/// flat up to the frame edge.
#[derive(Debug)]
struct Conv3 {
    conv: Conv2d,
}

impl Conv3 {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.conv.forward(&x.pad_with_same(2, 1, 1)?.pad_with_same(3, 1, 1)?)
    }
}

fn conv3(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Conv3> {
    let cfg = Conv2dConfig {
        stride,
        ..Default::default()
    };
    Ok(Conv3 {
        conv: conv2d(cin, cout, 3, cfg, vb)?,
    })
}

impl Encoder {
    fn new(cfg: &CodecConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let w = &cfg.widths;
        let conv_in = conv3(3, w[0], 1, vb.pp("conv_in"))?;
        let mut downs = Vec::new();
        for i in 0..w.len() {
            let cout = w[(i + 1).min(w.len() - 1)];
            downs.push(conv3(w[i], cout, 2, vb.pp(format!("down.{i}")))?);
        }
        let conv_out = conv3(*w.last().unwrap(), cfg.channels, 1, vb.pp("conv_out"))?;
        Ok(Self { conv_in, downs, conv_out })
    }

    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = self.conv_in.forward(x)?.silu()?;
        for d in &self.downs {
            h = d.forward(&h)?.silu()?;
        }
        self.conv_out.forward(&h)
    }
}

impl Decoder {
    fn new(cfg: &CodecConfig, vb: VarBuilder) -> candle_core::Result<Self> {
        let w = &cfg.widths;
        let top = *w.last().unwrap();
        let conv_in = conv3(cfg.channels, top, 1, vb.pp("conv_in"))?;
        let mut ups = Vec::new();
        for i in (0..w.len()).rev() {
            let cin = w[(i + 1).min(w.len() - 1)];
            ups.push(conv3(cin, w[i], 1, vb.pp(format!("up.{i}")))?);
        }
        let conv_out = conv3(w[0], 3, 1, vb.pp("conv_out"))?;
        Ok(Self { conv_in, ups, conv_out })
    }

    fn forward(&self, z: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = self.conv_in.forward(z)?.silu()?;
        for u in &self.ups {
            let (_, _, hh, ww) = h.dims4()?;
            h = u.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?.silu()?;
        }
        self.conv_out.forward(&h)
    }
}

/// Plain convolutional autoencoder. Weights are immutable after construction
/// apart from training, so encode/decode are pure.
#[derive(Debug)]
pub struct LatentCodec {
    cfg: CodecConfig,
    params: ParamStore,
    encoder: Encoder,
    decoder: Decoder,
    /// Multiplier applied to raw encoder output so latents have roughly unit
    /// variance; fitted after training.
    latent_scale: f64,
    device: Device,
    dtype: DType,
}

impl LatentCodec {
    pub fn new(cfg: CodecConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let params = ParamStore::new(seed);
        let vb = params.builder(dtype, device);
        let encoder = Encoder::new(&cfg, vb.pp("encoder"))?;
        let decoder = Decoder::new(&cfg, vb.pp("decoder"))?;
        Ok(Self {
            cfg,
            params,
            encoder,
            decoder,
            latent_scale: 1.0,
            device: device.clone(),
            dtype,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn factor(&self) -> usize {
        self.cfg.factor
    }

    pub fn channels(&self) -> usize {
        self.cfg.channels
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn latent_scale(&self) -> f64 {
        self.latent_scale
    }

    pub fn set_latent_scale(&mut self, s: f64) -> Result<()> {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::invalid(format!("latent scale {s} must be positive")));
        }
        self.latent_scale = s;
        Ok(())
    }

    fn check_size(&self, h: usize, w: usize) -> Result<()> {
        let f = self.cfg.factor;
        if h % f != 0 || w % f != 0 {
            return Err(Error::shape(format!("{h}x{w} image is not divisible by codec factor {f}")));
        }
        Ok(())
    }

    /// Raw batched encode of `[N, 3, H, W]`, before latent scaling. Used by training.
    pub fn encode_raw(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        self.check_size(h, w)?;
        Ok(self.encoder.forward(x)?)
    }

    /// Raw batched decode of `[N, C, h, w]`, before clamping. Used by training.
    pub fn decode_raw(&self, z: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = z.dims4()?;
        if c != self.cfg.channels {
            return Err(Error::shape(format!("expected {} latent channels, got {c}", self.cfg.channels)));
        }
        Ok(self.decoder.forward(z)?)
    }

    /// Scaled latents for a batch `[N, 3, H, W]`.
    pub fn encode_batch(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode_raw(&x.to_dtype(self.dtype)?)?.affine(self.latent_scale, 0.0)?)
    }

    /// Clamped pixels for a batch of scaled latents `[N, C, h, w]`.
    pub fn decode_batch(&self, z: &Tensor) -> Result<Tensor> {
        let z = z.to_dtype(self.dtype)?.affine(1.0 / self.latent_scale, 0.0)?;
        Ok(self.decode_raw(&z)?.clamp(-1f32, 1f32)?)
    }

    pub fn encode(&self, image: &ImageRGB) -> Result<LatentGrid> {
        self.check_size(image.height(), image.width())?;
        let x = image.to_tensor(self.dtype, &self.device)?.unsqueeze(0)?;
        Ok(LatentGrid {
            data: self.encode_batch(&x)?.squeeze(0)?,
            factor: self.cfg.factor,
        })
    }

    pub fn decode(&self, latent: &LatentGrid) -> Result<ImageRGB> {
        let z = latent.data.unsqueeze(0)?;
        let all_finite = z
            .to_dtype(DType::F64)?
            .flatten_all()?
            .to_vec1::<f64>()?
            .iter()
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(Error::invalid("latent has non-finite values"));
        }
        ImageRGB::from_tensor(&self.decode_batch(&z)?.squeeze(0)?)
    }

    /// Frame-wise encode; each frame goes through [`Self::encode`] on its own.
    pub fn encode_video(&self, frames: &[ImageRGB], frame_rate: f64) -> Result<VideoLatent> {
        let first = frames.first().ok_or_else(|| Error::shape("empty frame sequence"))?;
        if frames
            .iter()
            .any(|f| f.height() != first.height() || f.width() != first.width())
        {
            return Err(Error::shape("frames have heterogeneous shapes"));
        }
        let latents = frames
            .iter()
            .map(|f| Ok(self.encode(f)?.data))
            .collect::<Result<Vec<_>>>()?;
        VideoLatent::new(Tensor::stack(&latents, 0)?, frame_rate)
    }

    pub fn decode_video(&self, v: &VideoLatent) -> Result<Vec<ImageRGB>> {
        (0..v.frames())
            .map(|i| {
                self.decode(&LatentGrid {
                    data: v.data.get(i)?,
                    factor: self.cfg.factor,
                })
            })
            .collect()
    }

    /// Fit `latent_scale` so encoded latents of `images` have unit standard deviation.
    pub fn fit_latent_scale(&mut self, images: &Tensor) -> Result<f64> {
        let z = self.encode_raw(&images.to_dtype(self.dtype)?)?.flatten_all()?;
        let mean = z.mean(D::Minus1)?;
        let var = z.broadcast_sub(&mean)?.sqr()?.mean(D::Minus1)?;
        let std = var.to_dtype(DType::F64)?.to_scalar::<f64>()?.sqrt();
        let scale = if std > 1e-8 { 1.0 / std } else { 1.0 };
        self.set_latent_scale(scale)?;
        Ok(scale)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut header = Header::new();
        header.insert("f".into(), self.cfg.factor.into());
        header.insert("C".into(), self.cfg.channels.into());
        header.insert("version".into(), CODEC_VERSION.into());
        header.insert("widths".into(), serde_json::to_value(&self.cfg.widths)?);
        header.insert("latent_scale".into(), self.latent_scale.into());
        save_checkpoint(path, self.params.tensors(""), &header)
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let (header, tensors) = load_checkpoint(path, device)?;
        let version: u32 = header_field(&header, "version", path)?;
        if version != CODEC_VERSION {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("unsupported codec version {version}"),
            });
        }
        let cfg = CodecConfig {
            factor: header_field(&header, "f", path)?,
            channels: header_field(&header, "C", path)?,
            widths: header_field(&header, "widths", path)?,
        };
        let mut codec = Self::new(cfg, 0, dtype, device)?;
        codec.params.load_tensors(&tensors, "", path)?;
        codec.set_latent_scale(header_field(&header, "latent_scale", path)?)?;
        Ok(codec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn codec() -> LatentCodec {
        LatentCodec::new(CodecConfig::default(), 0, DType::F32, &Device::Cpu).unwrap()
    }

    fn noise_image(h: usize, w: usize, seed: u32) -> ImageRGB {
        let data = (0..3 * h * w)
            .map(|i| (((i as u32).wrapping_mul(2654435761).wrapping_add(seed) >> 8) as f32 / (1u32 << 24) as f32) * 2.0 - 1.0)
            .collect();
        ImageRGB::new(data, h, w).unwrap()
    }

    #[test]
    fn encode_shapes() {
        let c = codec();
        assert_eq!(c.encode(&noise_image(64, 64, 1)).unwrap().dims(), (4, 8, 8));
        assert_eq!(c.encode(&noise_image(48, 64, 1)).unwrap().dims(), (4, 6, 8));
        let err = c.encode(&noise_image(60, 64, 1)).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
    }

    #[test]
    fn decode_shape_range_and_determinism() {
        let c = codec();
        let z = LatentGrid {
            data: Tensor::ones((4, 8, 8), DType::F32, &Device::Cpu).unwrap().affine(5.0, 0.0).unwrap(),
            factor: 8,
        };
        let a = c.decode(&z).unwrap();
        let b = c.decode(&z).unwrap();
        assert_eq!((a.height(), a.width()), (64, 64));
        assert!(a.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(a, b);
    }

    #[test]
    fn video_is_framewise() {
        let c = codec();
        let frames: Vec<_> = (0..8).map(|i| noise_image(64, 64, i)).collect();
        let v = c.encode_video(&frames, 8.0).unwrap();
        assert_eq!(v.data.dims(), &[8, 4, 8, 8]);
        let decoded = c.decode_video(&v).unwrap();
        for (i, f) in frames.iter().enumerate() {
            assert_eq!(decoded[i], c.decode(&c.encode(f).unwrap()).unwrap());
        }
        assert!(c.encode_video(&[], 8.0).is_err());
        let mixed = vec![noise_image(64, 64, 0), noise_image(32, 64, 0)];
        assert!(c.encode_video(&mixed, 8.0).is_err());
    }

    #[test]
    fn factor_must_match_widths() {
        let cfg = CodecConfig {
            factor: 4,
            channels: 4,
            widths: vec![8, 8, 8],
        };
        assert!(LatentCodec::new(cfg, 0, DType::F32, &Device::Cpu).is_err());
    }
}
