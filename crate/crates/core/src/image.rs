use std::io::BufWriter;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// Planar RGB image with values in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ImageRGB {
    data: Vec<f32>,
    height: usize,
    width: usize,
}

impl ImageRGB {
    pub fn new(data: Vec<f32>, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("image must be non-empty"));
        }
        if data.len() != 3 * height * width {
            return Err(Error::shape(format!(
                "image data has {} values, expected 3x{height}x{width}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::invalid(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(Self { data, height, width })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat(c).take(height * width));
        }
        Self::new(data, height, width)
    }

    /// Build from a `[3, H, W]` tensor, clamping into [-1, 1].
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 channels, got {c}")));
        }
        let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite pixel"));
        }
        Self::new(data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(), h, w)
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, (3, self.height, self.width), device)?.to_dtype(dtype)?)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// Bilinear resize; antialiased (triangle filter widened by the scale)
    /// when shrinking.
    pub fn resize(&self, height: usize, width: usize) -> Result<Self> {
        if height == self.height && width == self.width {
            return Ok(self.clone());
        }
        let data = resize_planes(&self.data, 3, self.height, self.width, height, width);
        Self::new(data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(), height, width)
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        let hw = self.height * self.width;
        let mut out = Vec::with_capacity(3 * hw);
        for i in 0..hw {
            for c in 0..3 {
                let v = (self.data[c * hw + i] + 1.0) * 0.5 * 255.0;
                out.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        out
    }

    pub fn from_rgb8(bytes: &[u8], height: usize, width: usize) -> Result<Self> {
        let hw = height * width;
        if bytes.len() != 3 * hw {
            return Err(Error::shape("rgb8 buffer size mismatch"));
        }
        let mut data = vec![0f32; 3 * hw];
        for i in 0..hw {
            for c in 0..3 {
                data[c * hw + i] = bytes[3 * i + c] as f32 / 255.0 * 2.0 - 1.0;
            }
        }
        Self::new(data, height, width)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut enc = png::Encoder::new(BufWriter::new(file), self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        writer
            .write_image_data(&self.to_rgb8())
            .map_err(|e| Error::Png(e.to_string()))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let mut buf = vec![0; reader.output_buffer_size()];
        let info = reader.next_frame(&mut buf).map_err(|e| Error::Png(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let px = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => px.to_vec(),
            png::ColorType::Rgba => px.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => px.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            other => return Err(Error::Png(format!("unsupported color type {other:?}"))),
        };
        Self::from_rgb8(&rgb, h, w)
    }
}

fn filter_weights(in_len: usize, out_len: usize) -> Vec<(usize, Vec<f32>)> {
    let scale = in_len as f64 / out_len as f64;
    let support = scale.max(1.0);
    (0..out_len)
        .map(|i| {
            let center = (i as f64 + 0.5) * scale;
            let lo = ((center - support).floor().max(0.0)) as usize;
            let hi = ((center + support).ceil() as usize).min(in_len);
            let mut w: Vec<f64> = (lo..hi)
                .map(|j| {
                    let d = ((j as f64 + 0.5 - center) / support).abs();
                    (1.0 - d).max(0.0)
                })
                .collect();
            let total: f64 = w.iter().sum();
            if total > 0.0 {
                w.iter_mut().for_each(|v| *v /= total);
            } else {
                // Degenerate window (can only happen at extreme ratios): nearest.
                w.iter_mut().for_each(|v| *v = 0.0);
                let nearest = (center.floor() as usize).clamp(lo, hi - 1);
                w[nearest - lo] = 1.0;
            }
            (lo, w.into_iter().map(|v| v as f32).collect())
        })
        .collect()
}

/// Separable bilinear resize of `channels` planes of `h x w`, antialiased
/// when shrinking. Pixel centers at half-integers, edges clamped.
pub fn resize_planes(data: &[f32], channels: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    assert_eq!(data.len(), channels * h * w);
    let wx = filter_weights(w, ow);
    let wy = filter_weights(h, oh);
    let mut tmp = vec![0f32; channels * h * ow];
    for c in 0..channels {
        for y in 0..h {
            let row = &data[(c * h + y) * w..(c * h + y + 1) * w];
            for (x, (lo, ws)) in wx.iter().enumerate() {
                tmp[(c * h + y) * ow + x] = ws.iter().enumerate().map(|(k, wt)| wt * row[lo + k]).sum();
            }
        }
    }
    let mut out = vec![0f32; channels * oh * ow];
    for c in 0..channels {
        for (y, (lo, ws)) in wy.iter().enumerate() {
            for x in 0..ow {
                out[(c * oh + y) * ow + x] = ws
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * tmp[(c * h + lo + k) * ow + x])
                    .sum();
            }
        }
    }
    out
}

/// Resize the two trailing dimensions of an `[N, C, H, W]` or `[C, H, W]` tensor.
pub fn resize_tensor(t: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let dims = t.dims().to_vec();
    if dims.len() < 2 {
        return Err(Error::shape("resize needs at least two dims"));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    let planes: usize = dims[..dims.len() - 2].iter().product();
    let data: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
    let out = resize_planes(&data, planes, h, w, oh, ow);
    let mut new_dims = dims[..dims.len() - 2].to_vec();
    new_dims.extend([oh, ow]);
    Ok(Tensor::from_vec(out, new_dims, t.device())?.to_dtype(t.dtype())?)
}

pub fn mse(a: &ImageRGB, b: &ImageRGB) -> f64 {
    assert_eq!(a.data.len(), b.data.len());
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64
}

/// PSNR in dB for the [-1, 1] value range (peak-to-peak 2).
pub fn psnr(a: &ImageRGB, b: &ImageRGB) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (4.0 / m).log10()
}

pub fn mean_abs_diff(a: &ImageRGB, b: &ImageRGB) -> f64 {
    assert_eq!(a.data.len(), b.data.len());
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / a.data.len() as f64
}

pub fn max_abs_diff(a: &ImageRGB, b: &ImageRGB) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs() as f64).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range() {
        assert!(ImageRGB::new(vec![1.5; 12], 2, 2).is_err());
        assert!(ImageRGB::new(vec![f32::NAN; 12], 2, 2).is_err());
        assert!(ImageRGB::new(vec![0.0; 11], 2, 2).is_err());
    }

    #[test]
    fn resize_preserves_constants() {
        let img = ImageRGB::filled(16, 12, [0.25, -0.5, 0.75]).unwrap();
        for (h, w) in [(8, 6), (32, 24), (5, 7)] {
            let r = img.resize(h, w).unwrap();
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        assert!((r.get(c, y, x) - img.get(c, 0, 0)).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn downscale_by_two_averages_blocks() {
        // 2x shrink with a widened triangle covers each 2x2 block plus a
        // quarter-weighted ring; a checkerboard averages to its mean.
        let (h, w) = (8, 8);
        let mut data = vec![0f32; 3 * h * w];
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data[(c * h + y) * w + x] = if (x + y) % 2 == 0 { 1.0 } else { -1.0 };
                }
            }
        }
        let img = ImageRGB::new(data, h, w).unwrap();
        let r = img.resize(4, 4).unwrap();
        assert!(r.get(0, 1, 1).abs() < 1e-6);
    }

    #[test]
    fn png_round_trip_is_quantized() {
        let img = ImageRGB::filled(4, 6, [-1.0, 0.0, 1.0]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = ImageRGB::load_png(&p).unwrap();
        assert_eq!((back.height(), back.width()), (4, 6));
        assert!(max_abs_diff(&img, &back) <= 1.0 / 255.0 + 1e-6);
    }

    #[test]
    fn psnr_of_identical_is_infinite() {
        let img = ImageRGB::filled(4, 4, [0.1, 0.2, 0.3]).unwrap();
        assert!(psnr(&img, &img).is_infinite());
    }
}
