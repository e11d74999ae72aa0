use candle_core::{DType, Device, Tensor};
use magicvid_core::diffusion::{
    add_noise, add_noise_with, combine_guidance, sample, Guidance, NoiseSchedule, ScheduleConfig,
};
use magicvid_core::rng::gaussian;
use magicvid_core::Result;
use proptest::prelude::*;

fn vec64(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn schedule() -> NoiseSchedule {
    NoiseSchedule::linear(&ScheduleConfig::default()).unwrap()
}

#[test]
fn default_schedule_starts_near_one() {
    let s = schedule();
    assert!(s.alpha_bar(0).unwrap() >= 0.99);
    assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
}

proptest! {
    #[test]
    fn alpha_bar_strictly_decreasing(steps in 2usize..3000, lo in 1e-6f64..0.05, span in 0.0f64..0.5) {
        let cfg = ScheduleConfig { train_steps: steps, beta_start: lo, beta_end: (lo + span).min(0.999) };
        let log_bar: f64 = (0..steps)
            .map(|i| (1.0 - (cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (steps - 1) as f64)).ln())
            .sum();
        // Schedules whose product leaves the normal f64 range are rejected.
        let Ok(s) = NoiseSchedule::linear(&cfg) else {
            prop_assert!(log_bar < f64::MIN_POSITIVE.ln() + 1e-6);
            return Ok(());
        };
        prop_assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        prop_assert!(s.alpha_bars().iter().all(|a| *a > 0.0 && *a < 1.0));
    }

    #[test]
    fn timesteps_descend_from_start(start in 0usize..1000, n in 1usize..60) {
        let s = schedule();
        prop_assume!(n <= start + 1);
        let ts = s.timesteps(start, n).unwrap();
        prop_assert_eq!(ts.len(), n);
        prop_assert_eq!(ts[0], start);
        prop_assert!(ts.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn guidance_is_affine_in_scale(c in -10.0f64..10.0, u in -10.0f64..10.0, s in -5.0f64..12.0) {
        let dev = Device::Cpu;
        let ct = Tensor::new(&[c], &dev).unwrap();
        let ut = Tensor::new(&[u], &dev).unwrap();
        let at = |s: f64| vec64(&combine_guidance(&ct, &ut, s).unwrap())[0];
        let delta = at(s) - at(0.0);
        prop_assert!((delta - s * (c - u)).abs() <= 1e-12 * (1.0 + s.abs()) * (1.0 + (c - u).abs()));
    }
}

#[test]
fn guidance_endpoints_are_exact() {
    let dev = Device::Cpu;
    let c = gaussian(1, &[2, 3, 4], DType::F32, &dev).unwrap();
    let u = gaussian(2, &[2, 3, 4], DType::F32, &dev).unwrap();
    assert_eq!(vec64(&combine_guidance(&c, &u, 0.0).unwrap()), vec64(&u));
    assert_eq!(vec64(&combine_guidance(&c, &u, 1.0).unwrap()), vec64(&c));
    let one = Tensor::new(&[1f32], &dev).unwrap();
    let zero = Tensor::new(&[0f32], &dev).unwrap();
    assert_eq!(vec64(&combine_guidance(&one, &zero, 2.0).unwrap()), vec![2.0]);
}

#[test]
fn add_noise_limits() {
    let dev = Device::Cpu;
    let x0 = gaussian(3, &[4, 5], DType::F32, &dev).unwrap();
    let eps = gaussian(4, &[4, 5], DType::F32, &dev).unwrap();
    assert_eq!(vec64(&add_noise_with(&x0, &eps, 1.0).unwrap()), vec64(&x0));
    assert_eq!(vec64(&add_noise_with(&x0, &eps, 0.0).unwrap()), vec64(&eps));
}

#[test]
fn add_noise_variance_matches_closed_form() {
    let dev = Device::Cpu;
    let s = schedule();
    let n = 100_000;
    let x0 = Tensor::zeros(n, DType::F64, &dev).unwrap();
    for (k, t) in [0usize, 100, 500, 999].into_iter().enumerate() {
        let eps = gaussian(10 + k as u64, &[n], DType::F64, &dev).unwrap();
        let v = vec64(&add_noise(&s, &x0, t, &eps).unwrap());
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let want = 1.0 - s.alpha_bar(t).unwrap();
        // Sample variance of a normal has standard error var * sqrt(2 / (n - 1)).
        let se = want * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - want).abs() <= 3.0 * se, "t={t}: {var} vs {want}");
    }
}

#[test]
fn one_step_with_zero_model_is_the_x0_estimate() {
    let dev = Device::Cpu;
    let s = schedule();
    let init = gaussian(5, &[1, 4, 4, 4], DType::F64, &dev).unwrap();
    let ctx = Tensor::zeros((1, 2, 3), DType::F64, &dev).unwrap();
    let g = Guidance {
        scale: 3.0,
        cond: ctx.clone(),
        uncond: ctx,
    };
    let zero = |x: &Tensor, _t: usize, _c: &Tensor| -> Result<Tensor> { Ok(x.zeros_like()?) };
    let out = sample(&zero, &init, &s, &g, 1, None).unwrap();
    let ab = s.alpha_bars()[999];
    let want: Vec<f64> = vec64(&init).iter().map(|x| x / ab.sqrt()).collect();
    for (a, b) in vec64(&out).iter().zip(&want) {
        assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
    }
}

#[test]
fn oracle_denoiser_recovers_x0() {
    let dev = Device::Cpu;
    let s = schedule();
    let x0 = gaussian(6, &[1, 4, 4, 4], DType::F64, &dev).unwrap();
    let eps = gaussian(7, &[1, 4, 4, 4], DType::F64, &dev).unwrap();
    let start = 600;
    let xt = add_noise(&s, &x0, start, &eps).unwrap();
    let ctx = Tensor::zeros((1, 2, 3), DType::F64, &dev).unwrap();
    let g = Guidance {
        scale: 1.0,
        cond: ctx.clone(),
        uncond: ctx,
    };
    let x0c = x0.clone();
    let sched = s.clone();
    // Returns the exact noise that explains x given the known clean sample.
    let oracle = move |x: &Tensor, t: usize, _c: &Tensor| -> Result<Tensor> {
        let ab = sched.alpha_bar(t)?;
        Ok((x - x0c.affine(ab.sqrt(), 0.0)?)?.affine(1.0 / (1.0 - ab).sqrt(), 0.0)?)
    };
    let out = magicvid_core::diffusion::sample_from(&oracle, &xt, &s, &g, start, 7, None).unwrap();
    for (a, b) in vec64(&out).iter().zip(vec64(&x0)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn sampling_is_deterministic_and_validates_steps() {
    let dev = Device::Cpu;
    let s = schedule();
    let init = gaussian(8, &[1, 2, 4, 4], DType::F32, &dev).unwrap();
    let ctx = Tensor::ones((1, 2, 3), DType::F32, &dev).unwrap();
    let g = Guidance {
        scale: 2.0,
        cond: ctx.clone(),
        uncond: ctx.zeros_like().unwrap(),
    };
    let model = |x: &Tensor, t: usize, c: &Tensor| -> Result<Tensor> {
        Ok(x.affine(0.1, t as f64 * 1e-4)?.broadcast_add(&c.mean_all()?)?)
    };
    let a = sample(&model, &init, &s, &g, 5, None).unwrap();
    let b = sample(&model, &init, &s, &g, 5, None).unwrap();
    assert_eq!(vec64(&a), vec64(&b));
    assert!(sample(&model, &init, &s, &g, 0, None).is_err());
}

fn zero_ctx_guidance(scale: f64) -> Guidance {
    let ctx = Tensor::zeros((1, 2, 3), DType::F64, &Device::Cpu).unwrap();
    Guidance {
        scale,
        cond: ctx.clone(),
        uncond: ctx,
    }
}

#[test]
fn one_step_clip_clamps_the_x0_estimate() {
    let s = schedule();
    let init = gaussian(15, &[1, 4, 4, 4], DType::F64, &Device::Cpu).unwrap();
    let zero = |x: &Tensor, _t: usize, _c: &Tensor| -> Result<Tensor> { Ok(x.zeros_like()?) };
    let out = sample(&zero, &init, &s, &zero_ctx_guidance(3.0), 1, Some(2.5)).unwrap();
    let ab = s.alpha_bars()[999];
    for (a, x) in vec64(&out).iter().zip(vec64(&init)) {
        let want = (x / ab.sqrt()).clamp(-2.5, 2.5);
        assert!((a - want).abs() <= 1e-9 * want.abs().max(1.0), "{a} vs {want}");
    }
}

#[test]
fn clip_is_inert_for_an_oracle_inside_the_bound() {
    let dev = Device::Cpu;
    let s = schedule();
    let x0 = gaussian(16, &[1, 4, 4, 4], DType::F64, &dev).unwrap().tanh().unwrap().affine(2.0, 0.0).unwrap();
    let eps = gaussian(17, &[1, 4, 4, 4], DType::F64, &dev).unwrap();
    let xt = add_noise(&s, &x0, 999, &eps).unwrap();
    let sched = s.clone();
    let x0c = x0.clone();
    let oracle = move |x: &Tensor, t: usize, _c: &Tensor| -> Result<Tensor> {
        let ab = sched.alpha_bar(t)?;
        Ok((x - x0c.affine(ab.sqrt(), 0.0)?)?.affine(1.0 / (1.0 - ab).sqrt(), 0.0)?)
    };
    let out = sample(&oracle, &xt, &s, &zero_ctx_guidance(1.0), 9, Some(3.0)).unwrap();
    for (a, b) in vec64(&out).iter().zip(vec64(&x0)) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn non_positive_clip_rejected() {
    let s = schedule();
    let init = gaussian(18, &[1, 2, 2, 2], DType::F64, &Device::Cpu).unwrap();
    let zero = |x: &Tensor, _t: usize, _c: &Tensor| -> Result<Tensor> { Ok(x.zeros_like()?) };
    for c in [0.0, -1.0, f64::NAN, f64::INFINITY] {
        assert!(sample(&zero, &init, &s, &zero_ctx_guidance(1.0), 2, Some(c)).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn clipped_samples_stay_in_bounds(seed in 0u64..1000, steps in 1usize..12, c in 0.1f64..6.0, gain in -50.0f64..50.0) {
        let s = schedule();
        let init = gaussian(seed, &[1, 2, 3, 3], DType::F64, &Device::Cpu).unwrap();
        // A badly scaled predictor that would push the unclipped estimate far out.
        let wild = move |x: &Tensor, _t: usize, _c: &Tensor| -> Result<Tensor> { Ok(x.affine(gain, 0.0)?) };
        let out = sample(&wild, &init, &s, &zero_ctx_guidance(2.0), steps, Some(c)).unwrap();
        prop_assert!(vec64(&out).iter().all(|v| v.abs() <= c));
    }
}
