//! Procedural moving-shapes data with captions from a closed grammar.
//!
//! Every item is generated from its own seed derived from `(seed, index)`,
//! so corpora are reproducible and any prefix of a corpus is stable.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::rng;
use crate::vfi::Triplet;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusKind {
    ShapesImage,
    ShapesVideo,
    Triplets,
}

impl FromStr for CorpusKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes-image" => Ok(Self::ShapesImage),
            "shapes-video" => Ok(Self::ShapesVideo),
            "triplets" => Ok(Self::Triplets),
            other => Err(Error::invalid(format!("unknown corpus kind {other:?}"))),
        }
    }
}

impl fmt::Display for CorpusKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::ShapesImage => "shapes-image",
            Self::ShapesVideo => "shapes-video",
            Self::Triplets => "triplets",
        })
    }
}

const COLORS: &[(&str, [f32; 3])] = &[
    ("red", [0.9, -0.8, -0.8]),
    ("green", [-0.8, 0.8, -0.7]),
    ("blue", [-0.8, -0.6, 0.9]),
    ("yellow", [0.9, 0.85, -0.8]),
    ("purple", [0.4, -0.7, 0.7]),
    ("cyan", [-0.8, 0.8, 0.85]),
    ("orange", [0.95, 0.2, -0.9]),
];

const BACKGROUNDS: &[(&str, [f32; 3])] = &[
    ("black", [-0.95, -0.95, -0.95]),
    ("gray", [-0.1, -0.1, -0.1]),
    ("silver", [0.45, 0.45, 0.45]),
    ("white", [0.9, 0.9, 0.9]),
    ("navy", [-0.9, -0.85, -0.3]),
    ("brown", [-0.2, -0.5, -0.75]),
];

const SHAPES: &[&str] = &["circle", "square", "triangle"];
const DIRECTIONS: &[(&str, [f32; 2])] = &[("left", [0.0, -1.0]), ("right", [0.0, 1.0]), ("up", [-1.0, 0.0]), ("down", [1.0, 0.0])];

/// One scene: a single shape on a flat background.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Scene {
    pub shape: &'static str,
    pub color: &'static str,
    pub background: &'static str,
    pub large: bool,
    /// Offset added to every background channel, so each named background
    /// covers a band of intensities.
    pub brightness: f32,
    /// Start centre as a fraction of the side, (y, x).
    pub center: [f32; 2],
    /// Per-frame displacement as a fraction of the side, (y, x).
    pub velocity: [f32; 2],
    pub direction: Option<&'static str>,
}

impl Scene {
    pub fn random<R: Rng>(r: &mut R, moving: bool) -> Self {
        let (color, _) = COLORS[r.random_range(0..COLORS.len())];
        let (background, _) = BACKGROUNDS[r.random_range(0..BACKGROUNDS.len())];
        let shape = SHAPES[r.random_range(0..SHAPES.len())];
        let large = r.random_bool(0.5);
        let brightness = r.random_range(-0.15f32..0.15);
        let (direction, velocity) = if moving && r.random_bool(0.85) {
            let (name, d) = DIRECTIONS[r.random_range(0..DIRECTIONS.len())];
            let speed = r.random_range(0.03f32..0.06);
            (Some(name), [d[0] * speed, d[1] * speed])
        } else {
            (None, [0.0, 0.0])
        };
        let center = [r.random_range(0.3f32..0.7), r.random_range(0.3f32..0.7)];
        Self {
            shape,
            color,
            background,
            large,
            brightness,
            center,
            velocity,
            direction,
        }
    }

    pub fn caption(&self, video: bool) -> String {
        let size = if self.large { "large" } else { "small" };
        let motion = match (video, self.direction) {
            (false, _) => String::new(),
            (true, Some(d)) => format!(" moving {d}"),
            (true, None) => " resting".to_string(),
        };
        format!(
            "a {size} {} {}{motion} on a {} background",
            self.color, self.shape, self.background
        )
    }

    /// Render frame `k` at `size x size`, with 2x2 supersampling on edges.
    pub fn render(&self, size: usize, k: usize) -> Result<ImageRGB> {
        let fg = COLORS.iter().find(|c| c.0 == self.color).map(|c| c.1).unwrap_or([0.0; 3]);
        let bg = BACKGROUNDS.iter().find(|c| c.0 == self.background).map(|c| c.1).unwrap_or([0.0; 3]);
        let bg = bg.map(|v| (v + self.brightness).clamp(-1.0, 1.0));
        let s = size as f32;
        let radius = if self.large { 0.26 } else { 0.16 } * s;
        let cy = (self.center[0] + self.velocity[0] * k as f32) * s;
        let cx = (self.center[1] + self.velocity[1] * k as f32) * s;
        let inside = |y: f32, x: f32| -> bool {
            let (dy, dx) = (y - cy, x - cx);
            match self.shape {
                "circle" => dy * dy + dx * dx <= radius * radius,
                "square" => dy.abs() <= radius * 0.85 && dx.abs() <= radius * 0.85,
                _ => {
                    // upward isosceles triangle inscribed in the radius box
                    let top = -radius;
                    let t = (dy - top) / (2.0 * radius);
                    (0.0..=1.0).contains(&t) && dx.abs() <= t * radius
                }
            }
        };
        let mut data = vec![0f32; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let mut cover = 0.0;
                for (oy, ox) in [(0.25, 0.25), (0.25, 0.75), (0.75, 0.25), (0.75, 0.75)] {
                    if inside(y as f32 + oy, x as f32 + ox) {
                        cover += 0.25;
                    }
                }
                for c in 0..3 {
                    data[c * size * size + y * size + x] = cover * fg[c] + (1.0 - cover) * bg[c];
                }
            }
        }
        ImageRGB::new(data, size, size)
    }
}

/// A captioned still (one frame) or clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub caption: String,
    pub frames: Vec<ImageRGB>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Corpus {
    Images(Vec<Sample>),
    Videos(Vec<Sample>),
    Triplets(Vec<Triplet>),
}

impl Corpus {
    pub fn len(&self) -> usize {
        match self {
            Self::Images(v) | Self::Videos(v) => v.len(),
            Self::Triplets(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn samples(&self) -> Option<&[Sample]> {
        match self {
            Self::Images(v) | Self::Videos(v) => Some(v),
            Self::Triplets(_) => None,
        }
    }

    pub fn into_samples(self) -> Result<Vec<Sample>> {
        match self {
            Self::Images(v) | Self::Videos(v) => Ok(v),
            Self::Triplets(_) => Err(Error::invalid("expected a captioned corpus, got triplets")),
        }
    }

    pub fn into_triplets(self) -> Result<Vec<Triplet>> {
        match self {
            Self::Triplets(v) => Ok(v),
            _ => Err(Error::invalid("expected a triplet corpus")),
        }
    }

    /// Write `item_NNNNNN/frame_NNNNNN.png` directories plus `captions.jsonl`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut captions = fs::File::create(dir.join("captions.jsonl"))?;
        let write_frames = |i: usize, frames: &[&ImageRGB]| -> Result<String> {
            let name = format!("item_{i:06}");
            let sub = dir.join(&name);
            fs::create_dir_all(&sub)?;
            for (k, f) in frames.iter().enumerate() {
                f.save_png(&sub.join(format!("frame_{k:06}.png")))?;
            }
            Ok(name)
        };
        match self {
            Self::Images(v) | Self::Videos(v) => {
                for (i, s) in v.iter().enumerate() {
                    let name = write_frames(i, &s.frames.iter().collect::<Vec<_>>())?;
                    let line = serde_json::json!({"item": name, "caption": s.caption, "frames": s.frames.len()});
                    writeln!(captions, "{line}")?;
                }
            }
            Self::Triplets(v) => {
                for (i, t) in v.iter().enumerate() {
                    let name = write_frames(i, &[&t.a, &t.mid, &t.b])?;
                    writeln!(captions, "{}", serde_json::json!({"item": name, "caption": "", "frames": 3}))?;
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CorpusShape {
    pub size: usize,
    pub frames: usize,
}

impl Default for CorpusShape {
    fn default() -> Self {
        Self { size: 64, frames: 8 }
    }
}

/// `kind` is one of `shapes-image`, `shapes-video`, `triplets`; images are
/// 64x64 and clips have 8 frames.
pub fn make_synthetic_corpus(kind: &str, count: usize, seed: u64) -> Result<Corpus> {
    make_corpus(kind.parse()?, count, seed, CorpusShape::default())
}

pub fn make_corpus(kind: CorpusKind, count: usize, seed: u64, shape: CorpusShape) -> Result<Corpus> {
    if shape.size < 8 || shape.frames == 0 {
        return Err(Error::invalid("corpus frames must be at least 8x8 and clips non-empty"));
    }
    if kind == CorpusKind::Triplets && shape.frames < 3 {
        return Err(Error::invalid("triplets need clips of at least 3 frames"));
    }
    let item = |i: usize| -> Result<(Scene, usize)> {
        let mut r = rng::rng(rng::derive_seed(seed, i as u64));
        let scene = Scene::random(&mut r, kind != CorpusKind::ShapesImage);
        let start = r.random_range(0..shape.frames.saturating_sub(2).max(1));
        Ok((scene, start))
    };
    match kind {
        CorpusKind::ShapesImage => (0..count)
            .map(|i| {
                let (s, _) = item(i)?;
                Ok(Sample {
                    caption: s.caption(false),
                    frames: vec![s.render(shape.size, 0)?],
                })
            })
            .collect::<Result<_>>()
            .map(Corpus::Images),
        CorpusKind::ShapesVideo => (0..count)
            .map(|i| {
                let (s, _) = item(i)?;
                Ok(Sample {
                    caption: s.caption(true),
                    frames: (0..shape.frames).map(|k| s.render(shape.size, k)).collect::<Result<_>>()?,
                })
            })
            .collect::<Result<_>>()
            .map(Corpus::Videos),
        CorpusKind::Triplets => (0..count)
            .map(|i| {
                let (s, start) = item(i)?;
                Ok(Triplet {
                    a: s.render(shape.size, start)?,
                    mid: s.render(shape.size, start + 1)?,
                    b: s.render(shape.size, start + 2)?,
                })
            })
            .collect::<Result<_>>()
            .map(Corpus::Triplets),
    }
}
