use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use magicvid_core::gradcheck::{check, random_probes};
use magicvid_core::rng::{gaussian, rng};
use magicvid_core::unet::{inflate, DenoiserConfig, MotionConfig, SpatialDenoiser, SpatioTemporalDenoiser};

fn vec64(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    vec64(a).iter().zip(vec64(b)).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn tiny() -> DenoiserConfig {
    DenoiserConfig {
        widths: vec![8, 16],
        heads: 2,
        time_dim: 16,
        text_dim: 8,
        text_tokens: 4,
        appearance_dim: 8,
        appearance_tokens: 3,
        ..Default::default()
    }
}

struct Setup {
    spatial: Arc<SpatialDenoiser>,
    st: SpatioTemporalDenoiser,
    x: Tensor,
    text: Tensor,
}

fn setup(cfg: DenoiserConfig, frames: usize, side: usize, dtype: DType) -> Setup {
    let dev = Device::Cpu;
    let spatial = Arc::new(SpatialDenoiser::new(cfg.clone(), 1, dtype, &dev).unwrap());
    let st = inflate(&spatial, MotionConfig { max_frames: 8, heads: 2 }, 2).unwrap();
    let x = gaussian(3, &[1, frames, cfg.latent_channels, side, side], dtype, &dev).unwrap();
    let text = gaussian(4, &[1, cfg.text_tokens, cfg.text_dim], dtype, &dev).unwrap();
    Setup { spatial, st, x, text }
}

/// Frame-wise spatial prediction for `x: [1, F, C, h, w]`.
fn framewise(s: &Setup, t: usize) -> Tensor {
    let (_, f, c, h, w) = s.x.dims5().unwrap();
    let flat = s.x.reshape((f, c, h, w)).unwrap();
    let text = s.text.repeat((f, 1, 1)).unwrap();
    let y = s.spatial.forward(&flat, &vec![t; f], &text, None, None).unwrap();
    y.reshape((1, f, c, h, w)).unwrap()
}

fn perturb_motion_outputs(st: &SpatioTemporalDenoiser, seed: u64, scale: f64) {
    for (i, (name, var)) in st.motion().params().named_vars().into_iter().enumerate() {
        if name.contains(".out.") {
            let g = gaussian(seed + i as u64, var.dims(), var.dtype(), &Device::Cpu).unwrap();
            var.set(&g.affine(scale, 0.0).unwrap()).unwrap();
        }
    }
}

fn permute_frames(x: &Tensor, order: &[usize]) -> Tensor {
    let idx = Tensor::new(order.iter().map(|&i| i as u32).collect::<Vec<_>>(), x.device()).unwrap();
    x.index_select(&idx, 1).unwrap()
}

#[test]
fn fresh_inflation_equals_framewise_spatial() {
    let s = setup(DenoiserConfig::default(), 4, 8, DType::F32);
    let y = s.st.forward(&s.x, &[321], &s.text, None, None).unwrap();
    let d = max_abs_diff(&y, &framewise(&s, 321));
    assert!(d <= 1e-5, "max |diff| {d}");
}

#[test]
fn spatial_weights_are_aliased_not_copied() {
    let s = setup(tiny(), 3, 8, DType::F32);
    let before = s.st.forward(&s.x, &[10], &s.text, None, None).unwrap();
    assert!(Arc::ptr_eq(s.st.spatial(), &s.spatial));
    let (name, var) = s
        .spatial
        .params()
        .named_vars()
        .into_iter()
        .find(|(n, _)| n.starts_with("conv_in") && n.ends_with("weight"))
        .unwrap();
    var.set(&var.as_tensor().affine(1.5, 0.1).unwrap()).unwrap();
    let after_st = s.st.forward(&s.x, &[10], &s.text, None, None).unwrap();
    let after_sp = framewise(&s, 10);
    assert!(max_abs_diff(&before, &after_st) > 1e-3, "mutating {name} should change the inflated model");
    assert!(max_abs_diff(&after_st, &after_sp) <= 1e-5);
}

#[test]
fn frame_order_matters_only_after_motion_training() {
    let s = setup(tiny(), 4, 8, DType::F32);
    let order = [2, 0, 3, 1];
    let run = |x: &Tensor| s.st.forward(x, &[200], &s.text, None, None).unwrap();
    let y = run(&s.x);
    let y_perm = run(&permute_frames(&s.x, &order));
    assert!(max_abs_diff(&permute_frames(&y, &order), &y_perm) <= 1e-5);

    perturb_motion_outputs(&s.st, 50, 0.5);
    let y = run(&s.x);
    let y_perm = run(&permute_frames(&s.x, &order));
    assert!(max_abs_diff(&permute_frames(&y, &order), &y_perm) > 1e-3);
}

#[test]
fn single_frame_attention_returns_values() {
    let s = setup(tiny(), 1, 8, DType::F64);
    perturb_motion_outputs(&s.st, 60, 0.5);
    let h = gaussian(7, &[2, 8, 4, 4], DType::F64, &Device::Cpu).unwrap();
    for m in s.st.motion().modules().iter().take(1) {
        let mixed = m.mixed(&h, 1).unwrap();
        let values = m.values(&h, 1).unwrap();
        assert!(max_abs_diff(&mixed, &values) <= 1e-12);
    }
}

#[test]
fn single_frame_query_key_gradients_vanish() {
    let s = setup(tiny(), 1, 8, DType::F64);
    perturb_motion_outputs(&s.st, 70, 0.5);
    let r = gaussian(8, s.x.dims(), DType::F64, &Device::Cpu).unwrap();
    let loss = (s.st.forward(&s.x, &[300], &s.text, None, None).unwrap() * &r)
        .unwrap()
        .sum_all()
        .unwrap();
    let grads = loss.backward().unwrap();
    let mut checked = 0;
    for (name, var) in s.st.motion().params().named_vars() {
        let g = grads.get(var.as_tensor()).map(vec64).unwrap_or_default();
        let mag = g.iter().map(|v| v.abs()).fold(0.0, f64::max);
        if name.contains(".q.") || name.contains(".k.") {
            assert_eq!(mag, 0.0, "{name}");
            checked += 1;
        }
        if name.contains(".v.") {
            assert!(mag > 0.0, "{name} should still learn");
        }
    }
    assert!(checked > 0);
}

#[test]
fn gradients_match_central_differences() {
    let s = setup(tiny(), 2, 8, DType::F64);
    perturb_motion_outputs(&s.st, 80, 0.3);
    let r = gaussian(9, s.x.dims(), DType::F64, &Device::Cpu).unwrap();
    let loss = || -> magicvid_core::Result<Tensor> {
        let y = s.st.forward(&s.x, &[250], &s.text, None, None)?;
        Ok((y * &r)?.sum_all()?)
    };
    let mut vars = s.spatial.params().named_vars();
    vars.extend(s.st.motion().params().named_vars());
    let probes = random_probes(&vars, 50, &mut rng(11));
    let h = 1e-4;
    let samples = check(loss, &probes, h).unwrap();
    // Central differences carry about eps*|L|/h of round-off; below ten times
    // that a gradient is indistinguishable from zero at this tolerance.
    let tol = 1e-3;
    let noise = 10.0 * f64::EPSILON * loss().unwrap().to_scalar::<f64>().unwrap().abs().max(1.0) / h;
    let floor = noise / tol;
    let worst = samples
        .iter()
        .map(|g| (g.rel_err(floor), g))
        .max_by(|a, b| a.0.total_cmp(&b.0))
        .unwrap();
    assert!(worst.0 <= tol, "worst {:?} rel {}", worst.1, worst.0);
    assert!(samples.iter().filter(|g| g.analytic != 0.0).count() >= 25);
}
