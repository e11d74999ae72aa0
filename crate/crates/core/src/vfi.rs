//! Frame interpolation with deformable separable kernels.
//!
//! A small encoder-decoder predicts, for every output pixel and for each of
//! the two input frames, a vertical and a horizontal kernel plus one offset
//! per tap. Each frame is warped with its kernels and the two warps are
//! blended with a predicted mask. Training is adversarial: a discriminator
//! scores frames through the quantized features of a small vector-quantized
//! autoencoder.

use std::collections::HashMap;
use std::path::Path;

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp3, DType, Device, Layout, Module, Shape, Tensor, D};
use candle_nn::{Conv2d, Init, VarBuilder};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::nn::conv3x3;
use crate::optim::{Adam, OptimConfig};
use crate::params::{header_field, load_checkpoint, save_checkpoint, Header, ParamStore};
use crate::rng;

pub const FORMAT_VERSION: u32 = 1;

/// Output layout for `n_key` keyframes with `gap` frames inserted between
/// each adjacent pair.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationPlan {
    pub n_key: usize,
    pub gap: usize,
    /// Timestamps in (0, 1) of the inserted frames within one gap.
    pub timestamps: Vec<f64>,
}

impl InterpolationPlan {
    pub fn output_len(&self) -> usize {
        self.n_key + (self.n_key - 1) * self.gap
    }

    /// Output index of keyframe `i`.
    pub fn key_index(&self, i: usize) -> usize {
        i * (self.gap + 1)
    }
}

pub fn plan(n_key: usize, gap: usize) -> Result<InterpolationPlan> {
    if n_key < 2 {
        return Err(Error::invalid(format!("interpolation needs at least 2 keyframes, got {n_key}")));
    }
    let timestamps = (1..=gap).map(|j| j as f64 / (gap + 1) as f64).collect();
    Ok(InterpolationPlan { n_key, gap, timestamps })
}

/// Per-pixel separable kernels and tap offsets for one input frame.
///
/// `kernels: [B, 2n, H, W]` holds the vertical taps then the horizontal taps;
/// `offsets: [B, 2n, H, W]` holds the vertical then horizontal displacements.
#[derive(Clone, Debug)]
pub struct KernelField {
    pub kernels: Tensor,
    pub offsets: Tensor,
}

impl KernelField {
    pub fn taps(&self) -> Result<usize> {
        Ok(self.kernels.dim(1)? / 2)
    }

    /// Centre-tap delta kernels with zero offsets.
    pub fn identity(batch: usize, taps: usize, h: usize, w: usize, dtype: DType, dev: &Device) -> Result<Self> {
        let mut k = vec![0f32; batch * 2 * taps * h * w];
        let c = taps / 2;
        for b in 0..batch {
            for half in 0..2 {
                let ch = half * taps + c;
                let base = (b * 2 * taps + ch) * h * w;
                k[base..base + h * w].fill(1.0);
            }
        }
        let kernels = Tensor::from_vec(k, (batch, 2 * taps, h, w), dev)?.to_dtype(dtype)?;
        let offsets = kernels.zeros_like()?;
        Ok(Self { kernels, offsets })
    }

    /// Largest deviation of any per-pixel kernel sum from 1.
    pub fn normalization_error(&self) -> Result<f64> {
        let n = self.taps()?;
        let mut worst = 0f64;
        for start in [0, n] {
            let s = self.kernels.narrow(1, start, n)?.sum(1)?.to_dtype(DType::F64)?;
            let e = s.affine(1.0, -1.0)?.abs()?.max_all()?.to_scalar::<f64>()?;
            worst = worst.max(e);
        }
        Ok(worst)
    }
}

struct WarpGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    n: usize,
}

/// Bilinear sample at (y, x) with the coordinates clamped to the frame.
/// Returns the value and its partial derivatives in y and x (zero where the
/// coordinate is clamped).
#[inline]
fn sample(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> (f64, f64, f64, [(usize, f64); 4]) {
    let (ymax, xmax) = ((h - 1) as f64, (w - 1) as f64);
    let (yc, xc) = (y.clamp(0.0, ymax), x.clamp(0.0, xmax));
    let (y0, x0) = (yc.floor() as usize, xc.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (wy, wx) = (yc - y0 as f64, xc - x0 as f64);
    let (a, b, c, d) = (plane[y0 * w + x0], plane[y0 * w + x1], plane[y1 * w + x0], plane[y1 * w + x1]);
    let v = (1.0 - wy) * ((1.0 - wx) * a + wx * b) + wy * ((1.0 - wx) * c + wx * d);
    let dy = if y > 0.0 && y < ymax { (1.0 - wx) * (c - a) + wx * (d - b) } else { 0.0 };
    let dx = if x > 0.0 && x < xmax { (1.0 - wy) * (b - a) + wy * (d - c) } else { 0.0 };
    let taps = [
        (y0 * w + x0, (1.0 - wy) * (1.0 - wx)),
        (y0 * w + x1, (1.0 - wy) * wx),
        (y1 * w + x0, wy * (1.0 - wx)),
        (y1 * w + x1, wy * wx),
    ];
    (v, dy, dx, taps)
}

fn warp_forward(frame: &[f64], kern: &[f64], off: &[f64], g: &WarpGeom) -> Vec<f64> {
    let WarpGeom { b, c, h, w, n } = *g;
    let r = (n / 2) as f64;
    let hw = h * w;
    let mut out = vec![0f64; b * c * hw];
    for bi in 0..b {
        let kb = &kern[bi * 2 * n * hw..(bi + 1) * 2 * n * hw];
        let ob = &off[bi * 2 * n * hw..(bi + 1) * 2 * n * hw];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                for ci in 0..c {
                    let plane = &frame[(bi * c + ci) * hw..(bi * c + ci + 1) * hw];
                    let mut acc = 0.0;
                    for i in 0..n {
                        let kv = kb[i * hw + p];
                        let yy = y as f64 + i as f64 - r + ob[i * hw + p];
                        for j in 0..n {
                            let kh = kb[(n + j) * hw + p];
                            let xx = x as f64 + j as f64 - r + ob[(n + j) * hw + p];
                            acc += kv * kh * sample(plane, h, w, yy, xx).0;
                        }
                    }
                    out[(bi * c + ci) * hw + p] = acc;
                }
            }
        }
    }
    out
}

fn warp_backward(frame: &[f64], kern: &[f64], off: &[f64], grad: &[f64], g: &WarpGeom) -> [Vec<f64>; 3] {
    let WarpGeom { b, c, h, w, n } = *g;
    let r = (n / 2) as f64;
    let hw = h * w;
    let mut gf = vec![0f64; frame.len()];
    let mut gk = vec![0f64; kern.len()];
    let mut go = vec![0f64; off.len()];
    for bi in 0..b {
        let kbase = bi * 2 * n * hw;
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                for ci in 0..c {
                    let pidx = (bi * c + ci) * hw;
                    let plane = &frame[pidx..pidx + hw];
                    let gout = grad[pidx + p];
                    if gout == 0.0 {
                        continue;
                    }
                    for i in 0..n {
                        let kv = kern[kbase + i * hw + p];
                        let yy = y as f64 + i as f64 - r + off[kbase + i * hw + p];
                        for j in 0..n {
                            let kh = kern[kbase + (n + j) * hw + p];
                            let xx = x as f64 + j as f64 - r + off[kbase + (n + j) * hw + p];
                            let (v, dy, dx, taps) = sample(plane, h, w, yy, xx);
                            gk[kbase + i * hw + p] += gout * kh * v;
                            gk[kbase + (n + j) * hw + p] += gout * kv * v;
                            go[kbase + i * hw + p] += gout * kv * kh * dy;
                            go[kbase + (n + j) * hw + p] += gout * kv * kh * dx;
                            for (q, wq) in taps {
                                gf[pidx + q] += gout * kv * kh * wq;
                            }
                        }
                    }
                }
            }
        }
    }
    [gf, gk, go]
}

fn storage_f64(s: &CpuStorage, l: &Layout) -> candle_core::Result<Vec<f64>> {
    let (start, end) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("warp inputs must be contiguous".into()))?;
    Ok(match s {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        _ => return Err(candle_core::Error::Msg(format!("warp: unsupported dtype {:?}", s.dtype()))),
    })
}

fn tensor_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

struct Warp {
    n: usize,
}

impl Warp {
    fn geom(&self, shape: &Shape) -> candle_core::Result<WarpGeom> {
        let (b, c, h, w) = shape.dims4()?;
        Ok(WarpGeom { b, c, h, w, n: self.n })
    }
}

impl CustomOp3 for Warp {
    fn name(&self) -> &'static str {
        "deformable-separable-warp"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.geom(l1.shape())?;
        let out = warp_forward(&storage_f64(s1, l1)?, &storage_f64(s2, l2)?, &storage_f64(s3, l3)?, &g);
        let storage = match s1 {
            CpuStorage::F32(_) => CpuStorage::F32(out.into_iter().map(|x| x as f32).collect()),
            _ => CpuStorage::F64(out),
        };
        Ok((storage, l1.shape().clone()))
    }

    fn bwd(
        &self,
        frame: &Tensor,
        kern: &Tensor,
        off: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = self.geom(frame.shape())?;
        let [gf, gk, go] = warp_backward(
            &tensor_f64(frame)?,
            &tensor_f64(kern)?,
            &tensor_f64(off)?,
            &tensor_f64(grad)?,
            &g,
        );
        let mk = |v: Vec<f64>, like: &Tensor| Tensor::from_vec(v, like.shape(), like.device())?.to_dtype(like.dtype());
        Ok((Some(mk(gf, frame)?), Some(mk(gk, kern)?), Some(mk(go, off)?)))
    }
}

/// Warp `frame: [B, C, H, W]` with a kernel field. Output pixel (y, x) is
/// `sum_ij kv_i kh_j frame(y + i - r + dy_i, x + j - r + dx_j)` with bilinear
/// sampling and border clamping, `r = n / 2`. Differentiable in all inputs.
pub fn deformable_separable_warp(frame: &Tensor, field: &KernelField) -> Result<Tensor> {
    let (b, _, h, w) = frame.dims4()?;
    let n = field.taps()?;
    if n == 0 {
        return Err(Error::shape("kernel field has no taps"));
    }
    for t in [&field.kernels, &field.offsets] {
        if t.dims() != [b, 2 * n, h, w] {
            return Err(Error::shape(format!("field {:?} does not match frame {:?}", t.dims(), frame.dims())));
        }
    }
    let off_sq = field.offsets.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    if !off_sq.is_finite() {
        return Err(Error::invalid("non-finite kernel offsets"));
    }
    let dtype = frame.dtype();
    let kern = field.kernels.to_dtype(dtype)?.contiguous()?;
    let off = field.offsets.to_dtype(dtype)?.contiguous()?;
    Ok(frame.contiguous()?.apply_op3(&kern, &off, Warp { n })?)
}

/// Single-image convenience wrapper around [`deformable_separable_warp`].
pub fn warp_image(frame: &ImageRGB, field: &KernelField) -> Result<ImageRGB> {
    let x = frame.to_tensor(field.kernels.dtype(), field.kernels.device())?.unsqueeze(0)?;
    ImageRGB::from_tensor(&deformable_separable_warp(&x, field)?.squeeze(0)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VfiConfig {
    pub taps: usize,
    pub codebook: usize,
    pub code_dim: usize,
    pub widths: Vec<usize>,
    /// Initial logit of the centre tap; larger starts closer to a plain blend.
    pub center_bias: f64,
    pub adv_weight: f64,
    pub commitment: f64,
}

impl Default for VfiConfig {
    fn default() -> Self {
        Self {
            taps: 5,
            codebook: 128,
            code_dim: 16,
            widths: vec![24, 32, 48],
            center_bias: 3.0,
            adv_weight: 0.05,
            commitment: 0.25,
        }
    }
}

impl VfiConfig {
    pub fn validate(&self) -> Result<()> {
        if self.taps == 0 || self.taps % 2 == 0 {
            return Err(Error::Config(format!("taps must be odd, got {}", self.taps)));
        }
        if self.codebook == 0 || self.code_dim == 0 {
            return Err(Error::Config("codebook and code_dim must be positive".into()));
        }
        if self.widths.len() != 3 {
            return Err(Error::Config("field predictor takes exactly three widths".into()));
        }
        if self.adv_weight < 0.0 {
            return Err(Error::Config("adversarial weight must be >= 0".into()));
        }
        Ok(())
    }

    fn head_channels(&self) -> usize {
        8 * self.taps + 1
    }
}

/// Kernel fields for both inputs plus the blend mask `m: [B, 1, H, W]`;
/// the output is `m * warp(a) + (1 - m) * warp(b)`.
#[derive(Clone, Debug)]
pub struct FieldPair {
    pub a: KernelField,
    pub b: KernelField,
    pub mask: Tensor,
}

#[derive(Debug)]
pub struct FieldPredictor {
    e1: Conv2d,
    e2: Conv2d,
    e3: Conv2d,
    d2: Conv2d,
    d1: Conv2d,
    head: Conv2d,
    taps: usize,
}

impl FieldPredictor {
    fn new(cfg: &VfiConfig, vb: VarBuilder) -> Result<Self> {
        let w = &cfg.widths;
        let out = cfg.head_channels();
        let bound = 1e-2;
        let hw = vb.get_with_hints((out, w[0], 3, 3), "head.weight", Init::Uniform { lo: -bound, up: bound })?;
        let hb = vb.get_with_hints(out, "head.bias", Init::Const(0.0))?;
        let cfg2 = candle_nn::Conv2dConfig {
            padding: 1,
            ..Default::default()
        };
        Ok(Self {
            e1: conv3x3(7, w[0], 1, vb.pp("e1"))?,
            e2: conv3x3(w[0], w[1], 2, vb.pp("e2"))?,
            e3: conv3x3(w[1], w[2], 2, vb.pp("e3"))?,
            d2: conv3x3(w[2] + w[1], w[1], 1, vb.pp("d2"))?,
            d1: conv3x3(w[1] + w[0], w[0], 1, vb.pp("d1"))?,
            head: Conv2d::new(hw, Some(hb), cfg2),
            taps: cfg.taps,
        })
    }

    /// Per-channel bias with `center_bias` on every centre-tap logit.
    fn head_bias(cfg: &VfiConfig) -> Vec<f32> {
        let n = cfg.taps;
        let mut b = vec![0f32; cfg.head_channels()];
        for side in 0..2 {
            for half in 0..2 {
                b[side * 4 * n + half * n + n / 2] = cfg.center_bias as f32;
            }
        }
        b
    }

    pub fn forward(&self, a: &Tensor, b: &Tensor, t: &[f64]) -> Result<FieldPair> {
        let (bs, c, h, w) = a.dims4()?;
        if b.dims() != a.dims() {
            return Err(Error::shape(format!("frame shapes differ: {:?} vs {:?}", a.dims(), b.dims())));
        }
        if c != 3 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("frames must be RGB with sides divisible by 4, got {:?}", a.dims())));
        }
        if t.len() != bs || t.iter().any(|&x| !(x > 0.0 && x < 1.0)) {
            return Err(Error::invalid("one timestamp in (0, 1) per frame pair required"));
        }
        let tv: Vec<f32> = t.iter().flat_map(|&x| std::iter::repeat(x as f32).take(h * w)).collect();
        let tp = Tensor::from_vec(tv, (bs, 1, h, w), a.device())?.to_dtype(a.dtype())?;
        let x = Tensor::cat(&[a, b, &tp], 1)?;
        let e1 = self.e1.forward(&x)?.silu()?;
        let e2 = self.e2.forward(&e1)?.silu()?;
        let e3 = self.e3.forward(&e2)?.silu()?;
        let u2 = e3.upsample_nearest2d(h / 2, w / 2)?;
        let d2 = self.d2.forward(&Tensor::cat(&[&u2, &e2], 1)?)?.silu()?;
        let u1 = d2.upsample_nearest2d(h, w)?;
        let d1 = self.d1.forward(&Tensor::cat(&[&u1, &e1], 1)?)?.silu()?;
        let o = self.head.forward(&d1)?;
        let n = self.taps;
        let side = |s: usize| -> Result<KernelField> {
            let base = s * 4 * n;
            let kv = candle_nn::ops::softmax(&o.narrow(1, base, n)?, 1)?;
            let kh = candle_nn::ops::softmax(&o.narrow(1, base + n, n)?, 1)?;
            Ok(KernelField {
                kernels: Tensor::cat(&[&kv, &kh], 1)?,
                offsets: o.narrow(1, base + 2 * n, 2 * n)?,
            })
        };
        let mask = candle_nn::ops::sigmoid(&o.narrow(1, 8 * n, 1)?)?;
        Ok(FieldPair {
            a: side(0)?,
            b: side(1)?,
            mask,
        })
    }
}

/// Blend the two warped frames.
pub fn synthesize(a: &Tensor, b: &Tensor, fields: &FieldPair) -> Result<Tensor> {
    let wa = deformable_separable_warp(a, &fields.a)?;
    let wb = deformable_separable_warp(b, &fields.b)?;
    let m = &fields.mask;
    Ok((wa.broadcast_mul(m)? + wb.broadcast_mul(&m.affine(-1.0, 1.0)?)?)?)
}

/// Index of the nearest codebook row for every row of `z` (`[N, D]`, `[K, D]`
/// flattened). Distance ties go to the lowest index.
pub fn nearest_codes(z: &[f64], codebook: &[f64], dim: usize) -> Vec<u32> {
    z.chunks(dim)
        .map(|row| {
            let mut best = (f64::INFINITY, 0u32);
            for (k, e) in codebook.chunks(dim).enumerate() {
                let d: f64 = row.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, k as u32);
                }
            }
            best.1
        })
        .collect()
}

pub struct Quantized {
    /// Straight-through quantized features `[B, D, h, w]`.
    pub features: Tensor,
    pub indices: Vec<u32>,
    /// `||sg(z) - e||^2`, moves the codebook.
    pub codebook_loss: Tensor,
    /// `||z - sg(e)||^2`, keeps the encoder near its codes.
    pub commit_loss: Tensor,
}

/// Vector-quantized autoencoder whose quantized features feed a patch
/// discriminator head.
#[derive(Debug)]
pub struct VqCodec {
    enc1: Conv2d,
    enc2: Conv2d,
    codebook: Tensor,
    dec1: Conv2d,
    dec2: Conv2d,
    head1: Conv2d,
    head2: Conv2d,
    code_dim: usize,
}

impl VqCodec {
    fn new(cfg: &VfiConfig, vb: VarBuilder) -> Result<Self> {
        let k = cfg.codebook as f64;
        Ok(Self {
            enc1: conv3x3(3, 16, 2, vb.pp("enc1"))?,
            enc2: conv3x3(16, cfg.code_dim, 2, vb.pp("enc2"))?,
            codebook: vb.get_with_hints(
                (cfg.codebook, cfg.code_dim),
                "codebook",
                Init::Uniform { lo: -1.0 / k, up: 1.0 / k },
            )?,
            dec1: conv3x3(cfg.code_dim, 16, 1, vb.pp("dec1"))?,
            dec2: conv3x3(16, 3, 1, vb.pp("dec2"))?,
            head1: conv3x3(cfg.code_dim, 32, 1, vb.pp("head1"))?,
            head2: conv3x3(32, 1, 1, vb.pp("head2"))?,
            code_dim: cfg.code_dim,
        })
    }

    pub fn codebook(&self) -> &Tensor {
        &self.codebook
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.enc2.forward(&self.enc1.forward(x)?.silu()?)?)
    }

    pub fn quantize(&self, z: &Tensor) -> Result<Quantized> {
        let (b, d, h, w) = z.dims4()?;
        let tokens = z.permute((0, 2, 3, 1))?.contiguous()?.reshape((b * h * w, d))?;
        let indices = nearest_codes(&tensor_f64(&tokens)?, &tensor_f64(&self.codebook)?, self.code_dim);
        let idx = Tensor::from_vec(indices.clone(), b * h * w, z.device())?;
        let e = self.codebook.index_select(&idx, 0)?;
        let codebook_loss = (tokens.detach() - &e)?.sqr()?.mean_all()?;
        let commit_loss = (&tokens - e.detach())?.sqr()?.mean_all()?;
        let st = (&tokens + (e - &tokens)?.detach())?;
        let features = st.reshape((b, h, w, d))?.permute((0, 3, 1, 2))?.contiguous()?;
        Ok(Quantized {
            features,
            indices,
            codebook_loss,
            commit_loss,
        })
    }

    pub fn decode(&self, q: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = q.dims4()?;
        let x = self.dec1.forward(&q.upsample_nearest2d(2 * h, 2 * w)?)?.silu()?;
        Ok(self.dec2.forward(&x.upsample_nearest2d(4 * h, 4 * w)?)?)
    }

    /// Patch logits `[B, 1, H/4, W/4]` over quantized features.
    pub fn score(&self, q: &Tensor) -> Result<Tensor> {
        Ok(self.head2.forward(&candle_nn::ops::leaky_relu(&self.head1.forward(q)?, 0.2)?)?)
    }

    /// Per-image mean logit, along with the quantization result.
    pub fn discriminate(&self, x: &Tensor) -> Result<(Tensor, Quantized)> {
        let q = self.quantize(&self.encode(x)?)?;
        let s = self.score(&q.features)?;
        let b = s.dim(0)?;
        Ok((s.reshape((b, ()))?.mean(D::Minus1)?, q))
    }
}

#[derive(Debug)]
pub struct VfiModel {
    cfg: VfiConfig,
    gen_params: ParamStore,
    disc_params: ParamStore,
    predictor: FieldPredictor,
    disc: VqCodec,
    dtype: DType,
    device: Device,
}

impl VfiModel {
    pub fn new(cfg: VfiConfig, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let gen_params = ParamStore::new(rng::derive_seed(seed, 1));
        let disc_params = ParamStore::new(rng::derive_seed(seed, 2));
        let predictor = FieldPredictor::new(&cfg, gen_params.builder(dtype, device))?;
        let bias = Tensor::from_vec(FieldPredictor::head_bias(&cfg), cfg.head_channels(), device)?.to_dtype(dtype)?;
        gen_params
            .get("head.bias")
            .ok_or_else(|| Error::invalid("predictor head bias missing"))?
            .set(&bias)?;
        let disc = VqCodec::new(&cfg, disc_params.builder(dtype, device).pp("vq"))?;
        Ok(Self {
            cfg,
            gen_params,
            disc_params,
            predictor,
            disc,
            dtype,
            device: device.clone(),
        })
    }

    pub fn config(&self) -> &VfiConfig {
        &self.cfg
    }

    pub fn generator_params(&self) -> &ParamStore {
        &self.gen_params
    }

    pub fn discriminator_params(&self) -> &ParamStore {
        &self.disc_params
    }

    pub fn discriminator(&self) -> &VqCodec {
        &self.disc
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn predict_field(&self, a: &Tensor, b: &Tensor, t: &[f64]) -> Result<FieldPair> {
        self.predictor.forward(&a.to_dtype(self.dtype)?, &b.to_dtype(self.dtype)?, t)
    }

    /// In-between frames `[B, 3, H, W]` at timestamps `t`.
    pub fn forward(&self, a: &Tensor, b: &Tensor, t: &[f64]) -> Result<Tensor> {
        let (a, b) = (a.to_dtype(self.dtype)?, b.to_dtype(self.dtype)?);
        let f = self.predictor.forward(&a, &b, t)?;
        synthesize(&a, &b, &f)
    }

    pub fn interpolate_pair(&self, a: &ImageRGB, b: &ImageRGB, t: &[f64]) -> Result<Vec<ImageRGB>> {
        if a.height() != b.height() || a.width() != b.width() {
            return Err(Error::shape("interpolation pair has different sizes"));
        }
        if t.is_empty() {
            return Ok(Vec::new());
        }
        let n = t.len();
        let ta = repeat_image(a, n, self.dtype, &self.device)?;
        let tb = repeat_image(b, n, self.dtype, &self.device)?;
        let out = self.forward(&ta, &tb, t)?;
        (0..n).map(|i| ImageRGB::from_tensor(&out.get(i)?)).collect()
    }

    /// Generator objective: L1 to the true middle frame plus the weighted
    /// hinge-generator term. Returns (total, l1, adversarial).
    pub fn generator_loss(&self, a: &Tensor, mid: &Tensor, b: &Tensor, t: &[f64]) -> Result<(Tensor, Tensor, Tensor)> {
        self.generator_terms(&self.forward(a, b, t)?, mid)
    }

    /// [`Self::generator_loss`] for an already synthesized `pred`.
    pub fn generator_terms(&self, pred: &Tensor, mid: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let l1 = (pred - mid)?.abs()?.mean_all()?;
        let (logits, _) = self.disc.discriminate(pred)?;
        let adv = logits.mean_all()?.neg()?;
        let total = (&l1 + adv.affine(self.cfg.adv_weight, 0.0)?)?;
        Ok((total, l1, adv))
    }

    /// Hinge discriminator loss plus the VQ autoencoder losses on real frames.
    pub fn discriminator_loss(&self, real: &Tensor, fake: &Tensor) -> Result<Tensor> {
        let (lr, q) = self.disc.discriminate(real)?;
        let (lf, _) = self.disc.discriminate(&fake.detach())?;
        let hinge = ((lr.affine(-1.0, 1.0)?.relu()?.mean_all()? + lf.affine(1.0, 1.0)?.relu()?.mean_all()?)? * 0.5)?;
        let recon = (self.disc.decode(&q.features)? - real)?.abs()?.mean_all()?;
        let vq = (recon + q.codebook_loss + q.commit_loss.affine(self.cfg.commitment, 0.0)?)?;
        Ok((hinge + vq)?)
    }

    /// Fraction of correct real/fake calls (logit > 0 means real).
    pub fn discriminator_accuracy(&self, real: &Tensor, fake: &Tensor) -> Result<f64> {
        let lr = tensor_f64(&self.disc.discriminate(real)?.0)?;
        let lf = tensor_f64(&self.disc.discriminate(fake)?.0)?;
        let correct = lr.iter().filter(|&&x| x > 0.0).count() + lf.iter().filter(|&&x| x <= 0.0).count();
        Ok(correct as f64 / (lr.len() + lf.len()) as f64)
    }

    fn header(&self) -> Header {
        let mut h = Header::new();
        h.insert("taps".into(), self.cfg.taps.into());
        h.insert("codebook".into(), self.cfg.codebook.into());
        h.insert("version".into(), FORMAT_VERSION.into());
        h.insert("config".into(), serde_json::to_value(&self.cfg).unwrap_or_default());
        h
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = self.gen_params.tensors("generator.");
        tensors.extend(self.disc_params.tensors("discriminator."));
        save_checkpoint(path, tensors, &self.header())
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let (header, tensors): (Header, HashMap<String, Tensor>) = load_checkpoint(path, device)?;
        let version: u32 = header_field(&header, "version", path)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: format!("unsupported version {version}"),
            });
        }
        let cfg: VfiConfig = header_field(&header, "config", path)?;
        let taps: usize = header_field(&header, "taps", path)?;
        let codebook: usize = header_field(&header, "codebook", path)?;
        if taps != cfg.taps || codebook != cfg.codebook {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                msg: "header fields disagree with stored config".into(),
            });
        }
        let m = Self::new(cfg, 0, dtype, device)?;
        m.gen_params.load_tensors(&tensors, "generator.", path)?;
        m.disc_params.load_tensors(&tensors, "discriminator.", path)?;
        Ok(m)
    }
}

fn repeat_image(img: &ImageRGB, n: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let t = img.to_tensor(dtype, dev)?.unsqueeze(0)?;
    Ok(crate::nn::repeat_rows(&t, n)?)
}

/// Densify `frames` according to `plan`. Keyframes are copied through
/// untouched; with `gap = 0` the output equals the input.
pub fn interpolate(model: &VfiModel, frames: &[ImageRGB], plan: &InterpolationPlan) -> Result<Vec<ImageRGB>> {
    if frames.len() != plan.n_key {
        return Err(Error::invalid(format!(
            "plan expects {} keyframes, got {}",
            plan.n_key,
            frames.len()
        )));
    }
    let mut out = Vec::with_capacity(plan.output_len());
    for (i, f) in frames.iter().enumerate() {
        out.push(f.clone());
        if let Some(next) = frames.get(i + 1) {
            out.extend(model.interpolate_pair(f, next, &plan.timestamps)?);
        }
    }
    Ok(out)
}

/// Consecutive frames `(a, mid, b)` of a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub a: ImageRGB,
    pub mid: ImageRGB,
    pub b: ImageRGB,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VfiTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub optim: OptimConfig,
}

impl Default for VfiTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 8,
            seed: 0,
            optim: OptimConfig {
                lr: 1e-3,
                clip_norm: 1.0,
                final_lr_ratio: 1.0,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VfiStepLog {
    pub step: usize,
    pub l1: f64,
    pub g_adv: f64,
    pub d_loss: f64,
}

fn stack(images: &[&ImageRGB], dtype: DType, dev: &Device) -> Result<Tensor> {
    let ts = images
        .iter()
        .map(|i| i.to_tensor(dtype, dev))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&ts, 0)?)
}

/// Alternate discriminator and generator updates over minibatches of
/// triplets (the middle frame is the target at t = 0.5).
pub fn train_vfi(model: &VfiModel, corpus: &[Triplet], cfg: &VfiTrainConfig) -> Result<Vec<VfiStepLog>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut g_opt = Adam::new(model.gen_params.vars(), &cfg.optim)?;
    let mut d_opt = Adam::new(model.disc_params.vars(), &cfg.optim)?;
    let mut r = rng::rng(cfg.seed);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    let mut cursor = order.len();
    let mut log = Vec::with_capacity(cfg.steps);
    let (dt, dev) = (model.dtype, model.device.clone());
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch.max(1) {
            if cursor == order.len() {
                order.shuffle(&mut r);
                cursor = 0;
            }
            idx.push(order[cursor]);
            cursor += 1;
        }
        let pick = |f: fn(&Triplet) -> &ImageRGB| stack(&idx.iter().map(|&i| f(&corpus[i])).collect::<Vec<_>>(), dt, &dev);
        let a = pick(|t| &t.a)?;
        let mid = pick(|t| &t.mid)?;
        let b = pick(|t| &t.b)?;
        let ts = vec![0.5; idx.len()];

        let fake = model.forward(&a, &b, &ts)?;
        let d_loss = model.discriminator_loss(&mid, &fake)?;
        let d_val = d_loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        d_opt.schedule(step, cfg.steps);
        d_opt.backward_step(&d_loss)?;

        // The discriminator step only saw a detached copy, so the same
        // synthesis serves the generator update.
        let (total, l1, adv) = model.generator_terms(&fake, &mid)?;
        g_opt.schedule(step, cfg.steps);
        g_opt.backward_step(&total)?;
        let rec = VfiStepLog {
            step,
            l1: l1.to_dtype(DType::F64)?.to_scalar()?,
            g_adv: adv.to_dtype(DType::F64)?.to_scalar()?,
            d_loss: d_val,
        };
        log::debug!("vfi step {step}: l1 {:.4} adv {:.4} d {:.4}", rec.l1, rec.g_adv, rec.d_loss);
        log.push(rec);
    }
    Ok(log)
}
