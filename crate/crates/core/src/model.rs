//! The conditioned video denoiser used by the image-to-video and
//! video-to-video stages.
//!
//! Both stages hold the same `Arc<SpatialDenoiser>` and the same
//! conditioning modules (text encoder, appearance encoder, control branch);
//! each owns its own motion stack.

use std::path::Path;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::conditioning::{AppearanceEncoder, ControlBranch, ControlResiduals};
use crate::error::{Error, Result};
use crate::params::{header_field, load_checkpoint, save_checkpoint, Header, ParamStore};
use crate::rng::derive_seed;
use crate::text::TextEncoder;
use crate::unet::{inflate, DenoiserConfig, MotionConfig, SpatialDenoiser, SpatioTemporalDenoiser};

pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VideoModelConfig {
    pub denoiser: DenoiserConfig,
    pub motion: MotionConfig,
    /// Pixel-to-latent downsample factor of the codec the model runs under.
    pub codec_factor: usize,
}

impl Default for VideoModelConfig {
    fn default() -> Self {
        Self {
            denoiser: DenoiserConfig::default(),
            motion: MotionConfig::default(),
            codec_factor: 8,
        }
    }
}

/// Text encoder, appearance encoder and control branch, in one store.
#[derive(Debug)]
pub struct Conditioners {
    params: ParamStore,
    pub text: TextEncoder,
    pub appearance: AppearanceEncoder,
    pub control: ControlBranch,
}

impl Conditioners {
    fn new(spatial: &SpatialDenoiser, codec_factor: usize, seed: u64) -> Result<Self> {
        let cfg = spatial.config();
        let params = ParamStore::new(seed);
        let vb = params.builder(spatial.dtype(), spatial.device());
        let text = TextEncoder::new(cfg.text_tokens, cfg.text_dim, vb.pp("text"))?;
        let appearance = AppearanceEncoder::new(
            cfg.appearance_tokens,
            cfg.appearance_dim,
            cfg.heads,
            codec_factor,
            vb.pp("appearance"),
        )?;
        let control = ControlBranch::new(spatial, codec_factor, &params, "control")?;
        Ok(Self {
            params,
            text,
            appearance,
            control,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
}

/// Which reference conditions are active for one prediction.
#[derive(Clone, Copy, Debug)]
pub struct RefCond<'a> {
    /// Reference RGB `[B, 3, H, W]` at the stage's pixel resolution.
    pub reference: Option<&'a Tensor>,
    /// Appearance gate; ignored without a reference.
    pub lambda: f64,
    /// Whether control residuals are added.
    pub control: bool,
}

impl RefCond<'_> {
    pub const NONE: RefCond<'static> = RefCond {
        reference: None,
        lambda: 0.0,
        control: false,
    };
}

/// Appearance tokens and control residuals computed once per request.
pub struct PreparedRef {
    pub appearance: Option<(Tensor, f64)>,
    pub control: Option<ControlResiduals>,
}

#[derive(Debug)]
pub struct VideoModel {
    cfg: VideoModelConfig,
    spatial: Arc<SpatialDenoiser>,
    cond: Arc<Conditioners>,
    st: SpatioTemporalDenoiser,
}

impl VideoModel {
    pub fn new(cfg: VideoModelConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        let spatial = Arc::new(SpatialDenoiser::new(cfg.denoiser.clone(), derive_seed(seed, 1), dtype, device)?);
        let cond = Arc::new(Conditioners::new(&spatial, cfg.codec_factor, derive_seed(seed, 2))?);
        let st = inflate(&spatial, cfg.motion.clone(), derive_seed(seed, 3))?;
        Ok(Self { cfg, spatial, cond, st })
    }

    /// A model sharing this one's spatial layers and conditioning modules by
    /// reference, with a freshly inflated motion stack of its own.
    pub fn sibling(&self, motion: MotionConfig, seed: u64) -> Result<Self> {
        let st = inflate(&self.spatial, motion.clone(), derive_seed(seed, 3))?;
        let mut cfg = self.cfg.clone();
        cfg.motion = motion;
        Ok(Self {
            cfg,
            spatial: self.spatial.clone(),
            cond: self.cond.clone(),
            st,
        })
    }

    pub fn config(&self) -> &VideoModelConfig {
        &self.cfg
    }

    pub fn spatial(&self) -> &Arc<SpatialDenoiser> {
        &self.spatial
    }

    pub fn conditioners(&self) -> &Arc<Conditioners> {
        &self.cond
    }

    pub fn denoiser(&self) -> &SpatioTemporalDenoiser {
        &self.st
    }

    pub fn motion_params(&self) -> &ParamStore {
        self.st.motion().params()
    }

    pub fn shares_spatial_with(&self, other: &VideoModel) -> bool {
        Arc::ptr_eq(&self.spatial, &other.spatial) && Arc::ptr_eq(&self.cond, &other.cond)
    }

    pub fn dtype(&self) -> DType {
        self.spatial.dtype()
    }

    pub fn device(&self) -> &Device {
        self.spatial.device()
    }

    pub fn encode_text<S: AsRef<str>>(&self, prompts: &[S]) -> Result<Tensor> {
        self.cond.text.encode(prompts)
    }

    /// Appearance tokens and (timestep-dependent) control residuals for `cond`.
    pub fn prepare(&self, cond: &RefCond, t: &[usize], text: &Tensor) -> Result<PreparedRef> {
        let Some(reference) = cond.reference else {
            return Ok(PreparedRef {
                appearance: None,
                control: None,
            });
        };
        let reference = reference.to_dtype(self.dtype())?;
        let appearance = Some((self.cond.appearance.forward(&reference)?, cond.lambda));
        let control = if cond.control {
            Some(self.cond.control.forward(&reference, t, text)?)
        } else {
            None
        };
        Ok(PreparedRef { appearance, control })
    }

    /// Noise prediction for `x: [B, F, C, h, w]`.
    pub fn predict(&self, x: &Tensor, t: &[usize], text: &Tensor, cond: &RefCond) -> Result<Tensor> {
        let prep = self.prepare(cond, t, text)?;
        self.st.forward(
            x,
            t,
            text,
            prep.appearance.as_ref().map(|(a, g)| (a, *g)),
            prep.control.as_ref(),
        )
    }

    fn header(&self, kind: &str, shared: bool) -> Result<Header> {
        let mut h = Header::new();
        h.insert("kind".into(), kind.into());
        h.insert("version".into(), MODEL_VERSION.into());
        h.insert("widths".into(), serde_json::to_value(&self.cfg.denoiser.widths)?);
        h.insert("heads".into(), self.cfg.denoiser.heads.into());
        h.insert("max_frames".into(), self.cfg.motion.max_frames.into());
        h.insert("shared_spatial".into(), shared.into());
        h.insert("config".into(), serde_json::to_value(&self.cfg)?);
        Ok(h)
    }

    /// Full checkpoint: spatial layers, conditioning modules and motion stack.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.spatial.params().tensors("spatial.");
        tensors.extend(self.cond.params.tensors("cond."));
        tensors.extend(self.motion_params().tensors("motion."));
        save_checkpoint(path, tensors, &self.header("i2v", false)?)
    }

    /// Motion-only checkpoint for a sibling; records a digest of the shared
    /// spatial weights it was trained against.
    pub fn save_motion(&self, path: &Path) -> Result<()> {
        let mut h = self.header("v2v", true)?;
        h.insert("spatial_digest".into(), self.spatial.params().digest()?.into());
        save_checkpoint(path, self.motion_params().tensors("motion."), &h)
    }

    fn check_version(header: &Header, kind: &str, path: &Path) -> Result<VideoModelConfig> {
        let version: u32 = header_field(header, "version", path)?;
        let found: String = header_field(header, "kind", path)?;
        if version != MODEL_VERSION || found != kind {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("expected {kind} v{MODEL_VERSION}, found {found} v{version}"),
            });
        }
        header_field(header, "config", path)
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let (header, tensors) = load_checkpoint(path, device)?;
        let cfg = Self::check_version(&header, "i2v", path)?;
        let m = Self::new(cfg, 0, dtype, device)?;
        m.spatial.params().load_tensors(&tensors, "spatial.", path)?;
        m.cond.params.load_tensors(&tensors, "cond.", path)?;
        m.motion_params().load_tensors(&tensors, "motion.", path)?;
        Ok(m)
    }

    /// Load a motion-only checkpoint as a sibling of `base`.
    pub fn load_sibling(base: &VideoModel, path: &Path) -> Result<Self> {
        let (header, tensors) = load_checkpoint(path, base.device())?;
        let cfg = Self::check_version(&header, "v2v", path)?;
        let digest: String = header_field(&header, "spatial_digest", path)?;
        if digest != base.spatial.params().digest()? {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: "motion weights were trained against different spatial weights".into(),
            });
        }
        let m = base.sibling(cfg.motion, 0)?;
        m.motion_params().load_tensors(&tensors, "motion.", path)?;
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> VideoModelConfig {
        VideoModelConfig {
            denoiser: DenoiserConfig {
                widths: vec![8, 16],
                heads: 2,
                time_dim: 16,
                text_dim: 8,
                text_tokens: 4,
                appearance_dim: 8,
                appearance_tokens: 3,
                ..Default::default()
            },
            motion: MotionConfig { max_frames: 4, heads: 2 },
            codec_factor: 8,
        }
    }

    #[test]
    fn sibling_shares_spatial_but_not_motion() {
        let m = VideoModel::new(tiny(), 0, DType::F32, &Device::Cpu).unwrap();
        let s = m.sibling(MotionConfig { max_frames: 4, heads: 2 }, 1).unwrap();
        assert!(s.shares_spatial_with(&m));
        let mv = m.motion_params().vars();
        let sv = s.motion_params().vars();
        assert!(mv.iter().zip(&sv).all(|(a, b)| a.as_tensor().id() != b.as_tensor().id()));
    }

    #[test]
    fn checkpoints_round_trip() {
        let dev = Device::Cpu;
        let m = VideoModel::new(tiny(), 3, DType::F32, &dev).unwrap();
        let s = m.sibling(MotionConfig { max_frames: 4, heads: 2 }, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.save(&dir.path().join("i2v.safetensors")).unwrap();
        s.save_motion(&dir.path().join("v2v.safetensors")).unwrap();
        let m2 = VideoModel::load(&dir.path().join("i2v.safetensors"), DType::F32, &dev).unwrap();
        let s2 = VideoModel::load_sibling(&m2, &dir.path().join("v2v.safetensors")).unwrap();
        assert_eq!(m.spatial().params().digest().unwrap(), m2.spatial().params().digest().unwrap());
        assert_eq!(m.conditioners().params().digest().unwrap(), m2.conditioners().params().digest().unwrap());
        assert_eq!(s.motion_params().digest().unwrap(), s2.motion_params().digest().unwrap());
        assert!(s2.shares_spatial_with(&m2));
        let other = VideoModel::new(tiny(), 5, DType::F32, &dev).unwrap();
        assert!(VideoModel::load_sibling(&other, &dir.path().join("v2v.safetensors")).is_err());
    }
}
