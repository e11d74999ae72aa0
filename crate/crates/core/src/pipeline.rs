//! End-to-end orchestration: configuration, the staged run with its
//! manifest, and the shape-only dry run.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::{CodecConfig, LatentCodec};
use crate::diffusion::{NoiseSchedule, ScheduleConfig};
use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::model::{VideoModel, VideoModelConfig};
use crate::rng::derive_seed;
use crate::stages::{
    i2v, run_vfi_stage, t2i, v2v, FileT2i, I2vSettings, LatentT2i, SamplerSettings, StageGeometry, TextToImage,
    V2vSettings,
};
use crate::training::TrainingConfig;
use crate::unet::MotionConfig;
use crate::vfi::{VfiConfig, VfiModel};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSeeds {
    pub t2i: u64,
    pub i2v: u64,
    pub v2v: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct T2iSettings {
    pub sampler: SamplerSettings,
    /// Load the reference still from this PNG instead of generating it.
    pub reference_image: Option<PathBuf>,
}

impl Default for T2iSettings {
    fn default() -> Self {
        Self {
            sampler: SamplerSettings::default(),
            reference_image: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoints {
    pub codec: PathBuf,
    pub i2v: PathBuf,
    pub v2v: PathBuf,
    pub vfi: PathBuf,
}

impl Default for Checkpoints {
    fn default() -> Self {
        Self {
            codec: "checkpoints/codec.safetensors".into(),
            i2v: "checkpoints/i2v.safetensors".into(),
            v2v: "checkpoints/v2v.safetensors".into(),
            vfi: "checkpoints/vfi.safetensors".into(),
        }
    }
}

fn default_output_dir() -> PathBuf {
    "out".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub schema_version: u32,
    pub geometry: StageGeometry,
    pub seeds: StageSeeds,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub codec: CodecConfig,
    #[serde(default)]
    pub model: VideoModelConfig,
    #[serde(default)]
    pub v2v_motion: MotionConfig,
    #[serde(default)]
    pub vfi: VfiConfig,
    #[serde(default)]
    pub t2i: T2iSettings,
    #[serde(default)]
    pub i2v: I2vSettings,
    #[serde(default)]
    pub v2v: V2vSettings,
    #[serde(default)]
    pub checkpoints: Checkpoints,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl PipelineConfig {
    /// Parse and validate; relative paths are resolved against the
    /// directory of `path`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.checkpoints.codec);
        fix(&mut self.checkpoints.i2v);
        fix(&mut self.checkpoints.v2v);
        fix(&mut self.checkpoints.vfi);
        fix(&mut self.output_dir);
        fix(&mut self.training.log_dir);
        if let Some(p) = self.t2i.reference_image.as_mut() {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} unsupported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.codec.validate()?;
        self.geometry.validate(self.codec.factor)?;
        self.model.denoiser.validate()?;
        self.vfi.validate()?;
        NoiseSchedule::linear(&self.schedule)?;
        self.i2v.noise_prior.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.model.codec_factor != self.codec.factor {
            return Err(Error::Config("model.codec_factor must equal codec.factor".into()));
        }
        for (name, s) in [("i2v", self.i2v.lambda), ("v2v", self.v2v.lambda)] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("{name} lambda must be a finite value >= 0")));
            }
        }
        for (name, s) in [
            ("t2i", &self.t2i.sampler),
            ("i2v", &self.i2v.sampler),
            ("v2v", &self.v2v.sampler),
        ] {
            if !s.guidance.is_finite() || s.guidance < 0.0 {
                return Err(Error::Config(format!("{name} guidance must be finite and >= 0")));
            }
            if name != "v2v" && s.steps == 0 {
                return Err(Error::Config(format!("{name} needs at least one sampler step")));
            }
        }
        if !(self.v2v.strength > 0.0 && self.v2v.strength <= 1.0) {
            return Err(Error::Config("v2v strength must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form (object keys sorted).
    pub fn hash(&self) -> Result<String> {
        let value = serde_json::to_value(self)?;
        Ok(hex::encode(Sha256::digest(serde_json::to_string(&value)?.as_bytes())))
    }

    /// Checkpoints a run needs, in load order.
    pub fn required_checkpoints(&self) -> Vec<&Path> {
        vec![
            self.checkpoints.codec.as_path(),
            self.checkpoints.i2v.as_path(),
            self.checkpoints.v2v.as_path(),
            self.checkpoints.vfi.as_path(),
        ]
    }

    pub fn check_checkpoints(&self) -> Result<()> {
        for p in self.required_checkpoints() {
            if !p.is_file() {
                return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
            }
        }
        if let Some(p) = &self.t2i.reference_image {
            if !p.is_file() {
                return Err(Error::Config(format!("reference image {} does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Replace every stage seed with one derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = StageSeeds {
            t2i: derive_seed(seed, 1),
            i2v: derive_seed(seed, 2),
            v2v: derive_seed(seed, 3),
        };
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub frames: usize,
    /// `[frames, 3, height, width]`.
    pub shape: [usize; 4],
    /// SHA-256 over the frames' float data.
    pub digest: String,
    pub wall_clock_s: f64,
    pub dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub prompt: String,
    pub config_hash: String,
    pub seeds: StageSeeds,
    pub stages: Vec<StageRecord>,
    pub final_frames: usize,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn digests(&self) -> Vec<(&str, &str)> {
        self.stages.iter().map(|s| (s.stage.as_str(), s.digest.as_str())).collect()
    }
}

pub fn frames_digest(frames: &[ImageRGB]) -> String {
    let mut h = Sha256::new();
    for f in frames {
        h.update((f.height() as u64).to_le_bytes());
        h.update((f.width() as u64).to_le_bytes());
        for v in f.data() {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

pub fn write_frames(dir: &Path, frames: &[ImageRGB]) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, f) in frames.iter().enumerate() {
        f.save_png(&dir.join(format!("frame_{i:06}.png")))?;
    }
    Ok(())
}

pub fn read_frames(dir: &Path) -> Result<Vec<ImageRGB>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!("no PNG frames in {}", dir.display())));
    }
    paths.iter().map(|p| ImageRGB::load_png(p)).collect()
}

/// Everything a run loads from disk.
pub struct Models {
    pub codec: LatentCodec,
    pub i2v: VideoModel,
    pub v2v: VideoModel,
    pub vfi: VfiModel,
}

impl Models {
    pub fn load(cfg: &PipelineConfig, device: &Device) -> Result<Self> {
        let dt = DType::F32;
        let codec = LatentCodec::load(&cfg.checkpoints.codec, dt, device)?;
        let i2v = VideoModel::load(&cfg.checkpoints.i2v, dt, device)?;
        let v2v = VideoModel::load_sibling(&i2v, &cfg.checkpoints.v2v)?;
        let vfi = VfiModel::load(&cfg.checkpoints.vfi, dt, device)?;
        Ok(Self { codec, i2v, v2v, vfi })
    }
}

const ERROR_MARKER: &str = "ERROR";

/// Load checkpoints from `cfg` and run every stage, writing frames under
/// `out` (or the configured output directory) plus `manifest.json`.
pub fn run(prompt: &str, cfg: &PipelineConfig, out: Option<&Path>) -> Result<RunManifest> {
    cfg.validate()?;
    cfg.check_checkpoints()?;
    if prompt.trim().is_empty() {
        return Err(Error::Config("prompt must not be empty".into()));
    }
    let models = Models::load(cfg, &Device::Cpu)?;
    run_with(prompt, cfg, &models, out.unwrap_or(&cfg.output_dir))
}

/// [`run`] with preloaded models.
pub fn run_with(prompt: &str, cfg: &PipelineConfig, m: &Models, out: &Path) -> Result<RunManifest> {
    let schedule = NoiseSchedule::linear(&cfg.schedule)?;
    let g = &cfg.geometry;
    fs::create_dir_all(out)?;
    let _ = fs::remove_file(out.join(ERROR_MARKER));
    let mut manifest = RunManifest {
        prompt: prompt.to_string(),
        config_hash: cfg.hash()?,
        seeds: cfg.seeds.clone(),
        stages: Vec::new(),
        final_frames: g.final_frames(),
        error: None,
    };

    let result = (|| -> Result<()> {
        let mut record = |name: &'static str, frames: &[ImageRGB], started: Instant| -> Result<()> {
            let dir = out.join(name);
            write_frames(&dir, frames)?;
            let first = &frames[0];
            manifest.stages.push(StageRecord {
                stage: name.into(),
                frames: frames.len(),
                shape: [frames.len(), 3, first.height(), first.width()],
                digest: frames_digest(frames),
                wall_clock_s: started.elapsed().as_secs_f64(),
                dir,
            });
            Ok(())
        };

        let started = Instant::now();
        let reference = match &cfg.t2i.reference_image {
            Some(p) => t2i(&FileT2i { path: p.clone() }, prompt, cfg.seeds.t2i, g),
            None => {
                let gen = LatentT2i {
                    model: &m.i2v,
                    codec: &m.codec,
                    schedule: &schedule,
                    sampler: cfg.t2i.sampler.clone(),
                };
                t2i(&gen as &dyn TextToImage, prompt, cfg.seeds.t2i, g)
            }
        }
        .map_err(|e| e.in_stage("t2i"))?;
        record("t2i", std::slice::from_ref(&reference), started)?;

        let started = Instant::now();
        let keyframes = i2v(&m.i2v, &m.codec, &schedule, &reference, prompt, cfg.seeds.i2v, g, &cfg.i2v)
            .and_then(|v| m.codec.decode_video(&v))
            .map_err(|e| e.in_stage("i2v"))?;
        record("i2v", &keyframes, started)?;

        let started = Instant::now();
        let refined = v2v(
            &m.v2v,
            &m.codec,
            &schedule,
            &keyframes,
            &reference,
            prompt,
            cfg.seeds.v2v,
            g,
            &cfg.v2v,
        )
        .map_err(|e| e.in_stage("v2v"))?;
        record("v2v", &refined, started)?;

        let started = Instant::now();
        let full = run_vfi_stage(&m.vfi, &refined, g).map_err(|e| e.in_stage("vfi"))?;
        record("vfi", &full, started)?;
        Ok(())
    })();

    if let Err(e) = &result {
        manifest.error = Some(e.to_string());
        fs::write(out.join(ERROR_MARKER), format!("{e}\n"))?;
    }
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    result.map(|_| manifest)
}

/// Shape table of every stage output without loading or running anything.
/// The last line reports the final frame count.
pub fn dry_run(cfg: &PipelineConfig) -> Result<String> {
    cfg.validate()?;
    let g = &cfg.geometry;
    let f = cfg.codec.factor;
    let c = cfg.codec.channels;
    let mut s = String::new();
    writeln!(s, "{:<6} {:>7}  {:<18} {}", "stage", "frames", "pixels", "latent").ok();
    for (name, [n, ch, h, w]) in g.shape_table() {
        let latent = match name {
            "i2v" | "v2v" => format!("{n}x{c}x{}x{}", h / f, w / f),
            "t2i" => format!("1x{c}x{}x{}", h / f, w / f),
            _ => "-".into(),
        };
        writeln!(s, "{name:<6} {n:>7}  {:<18} {latent}", format!("{n}x{ch}x{h}x{w}")).ok();
    }
    write!(s, "keyframes {} -> final frames {}", g.i2v_frames, g.final_frames()).ok();
    Ok(s)
}
