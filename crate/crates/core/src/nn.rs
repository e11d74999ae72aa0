//! Shared layers. Everything here is built from differentiable tensor ops
//! only (no fused kernels without backward passes), so the same code runs
//! training, f32 inference and f64 gradient checks.

use candle_core::{DType, Device, Module, Tensor, D};
use candle_nn::{conv2d, group_norm, linear, linear_no_bias, Conv2d, Conv2dConfig, GroupNorm, Init, Linear, VarBuilder};

pub type CResult<T> = candle_core::Result<T>;

#[derive(Debug, Clone)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(size: usize, vb: VarBuilder) -> CResult<Self> {
        Ok(Self {
            weight: vb.get_with_hints(size, "weight", Init::Const(1.0))?,
            bias: vb.get_with_hints(size, "bias", Init::Const(0.0))?,
            eps: 1e-5,
        })
    }
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> CResult<Tensor> {
        let n = x.dim(D::Minus1)? as f64;
        let mean = (x.sum_keepdim(D::Minus1)? / n)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = (xc.sqr()?.sum_keepdim(D::Minus1)? / n)?;
        xc.broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

pub fn conv3x3(cin: usize, cout: usize, stride: usize, vb: VarBuilder) -> CResult<Conv2d> {
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    conv2d(cin, cout, 3, cfg, vb)
}

pub fn conv1x1(cin: usize, cout: usize, vb: VarBuilder) -> CResult<Conv2d> {
    conv2d(cin, cout, 1, Default::default(), vb)
}

/// 1x1 convolution with weights and bias initialized to exact zeros.
pub fn zero_conv1x1(cin: usize, cout: usize, vb: VarBuilder) -> CResult<Conv2d> {
    let w = vb.get_with_hints((cout, cin, 1, 1), "weight", Init::Const(0.0))?;
    let b = vb.get_with_hints(cout, "bias", Init::Const(0.0))?;
    Ok(Conv2d::new(w, Some(b), Default::default()))
}

pub fn zero_linear(cin: usize, cout: usize, vb: VarBuilder) -> CResult<Linear> {
    let w = vb.get_with_hints((cout, cin), "weight", Init::Const(0.0))?;
    let b = vb.get_with_hints(cout, "bias", Init::Const(0.0))?;
    Ok(Linear::new(w, Some(b)))
}

/// Sinusoidal features of integer positions: `[n, dim]`, sin half then cos half.
pub fn sinusoidal(positions: &[f64], dim: usize, max_period: f64, dtype: DType, dev: &Device) -> CResult<Tensor> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(positions.len() * dim);
    for &p in positions {
        for i in 0..dim {
            let k = i % half.max(1);
            let freq = (-(max_period.ln()) * k as f64 / half.max(1) as f64).exp();
            let arg = p * freq;
            v.push(if i < half { arg.sin() } else { arg.cos() });
        }
    }
    Tensor::from_vec(v, (positions.len(), dim), dev)?.to_dtype(dtype)
}

#[derive(Debug, Clone)]
pub struct TimeEmbedding {
    freq_dim: usize,
    lin1: Linear,
    lin2: Linear,
}

impl TimeEmbedding {
    pub fn new(freq_dim: usize, out_dim: usize, vb: VarBuilder) -> CResult<Self> {
        Ok(Self {
            freq_dim,
            lin1: linear(freq_dim, out_dim, vb.pp("lin1"))?,
            lin2: linear(out_dim, out_dim, vb.pp("lin2"))?,
        })
    }

    /// `timesteps` has one entry per batch element.
    pub fn forward(&self, timesteps: &[usize], dtype: DType, dev: &Device) -> CResult<Tensor> {
        let pos: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
        let f = sinusoidal(&pos, self.freq_dim, 10_000.0, dtype, dev)?;
        self.lin2.forward(&self.lin1.forward(&f)?.silu()?)
    }
}

#[derive(Debug, Clone)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    temb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

pub fn groups_for(c: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| c % g == 0).unwrap_or(1)
}

impl ResBlock {
    pub fn new(cin: usize, cout: usize, temb_dim: usize, vb: VarBuilder) -> CResult<Self> {
        Ok(Self {
            norm1: group_norm(groups_for(cin), cin, 1e-5, vb.pp("norm1"))?,
            conv1: conv3x3(cin, cout, 1, vb.pp("conv1"))?,
            temb: linear(temb_dim, cout, vb.pp("temb"))?,
            norm2: group_norm(groups_for(cout), cout, 1e-5, vb.pp("norm2"))?,
            conv2: conv3x3(cout, cout, 1, vb.pp("conv2"))?,
            skip: if cin == cout {
                None
            } else {
                Some(conv1x1(cin, cout, vb.pp("skip"))?)
            },
        })
    }

    /// `temb` is `[N, temb_dim]` with one row per image in `x`.
    pub fn forward(&self, x: &Tensor, temb: &Tensor) -> CResult<Tensor> {
        let h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        let t = self.temb.forward(&temb.silu()?)?.unsqueeze(2)?.unsqueeze(3)?;
        let h = h.broadcast_add(&t)?;
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let skip = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        skip + h
    }
}

/// Multi-head scaled dot-product attention on `[N, L, C]` projections.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> CResult<Tensor> {
    let (n, lq, c) = q.dims3()?;
    let lk = k.dim(1)?;
    let hd = c / heads;
    let split = |t: &Tensor, l: usize| -> CResult<Tensor> {
        t.reshape((n, l, heads, hd))?.transpose(1, 2)?.contiguous()?.reshape((n * heads, l, hd))
    };
    let (qh, kh, vh) = (split(q, lq)?, split(k, lk)?, split(v, lk)?);
    let scores = (qh.matmul(&kh.t()?)? * (1.0 / (hd as f64).sqrt()))?;
    let w = candle_nn::ops::softmax(&scores, D::Minus1)?;
    w.matmul(&vh)?
        .reshape((n, heads, lq, hd))?
        .transpose(1, 2)?
        .contiguous()?
        .reshape((n, lq, c))
}

/// `[N, C, H, W]` -> `[N, H*W, C]`.
pub fn to_tokens(x: &Tensor) -> CResult<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    x.reshape((n, c, h * w))?.transpose(1, 2)?.contiguous()
}

/// `[N, H*W, C]` -> `[N, C, H, W]`.
pub fn from_tokens(x: &Tensor, h: usize, w: usize) -> CResult<Tensor> {
    let (n, _, c) = x.dims3()?;
    x.transpose(1, 2)?.contiguous()?.reshape((n, c, h, w))
}

/// Repeat each batch row `times` times along dim 0: `[B, ...]` -> `[B*times, ...]`.
pub fn repeat_rows(x: &Tensor, times: usize) -> CResult<Tensor> {
    if times == 1 {
        return Ok(x.clone());
    }
    let dims = x.dims().to_vec();
    let mut expanded = vec![dims[0], times];
    expanded.extend_from_slice(&dims[1..]);
    let mut out = vec![dims[0] * times];
    out.extend_from_slice(&dims[1..]);
    x.unsqueeze(1)?.expand(expanded)?.contiguous()?.reshape(out)
}

pub fn linear_nb(cin: usize, cout: usize, vb: VarBuilder) -> CResult<Linear> {
    linear_no_bias(cin, cout, vb)
}
