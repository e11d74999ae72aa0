//! Noise schedule, forward noising, classifier-free guidance and the
//! deterministic DDIM reverse loop (epsilon parameterization).

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub train_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            train_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta schedule.
    pub fn linear(cfg: &ScheduleConfig) -> Result<Self> {
        let n = cfg.train_steps;
        if n < 2 {
            return Err(Error::Config("schedule needs at least two steps".into()));
        }
        let ok = |b: f64| b > 0.0 && b < 1.0;
        if !ok(cfg.beta_start) || !ok(cfg.beta_end) || cfg.beta_end < cfg.beta_start {
            return Err(Error::Config(format!(
                "betas must satisfy 0 < start <= end < 1, got {} .. {}",
                cfg.beta_start, cfg.beta_end
            )));
        }
        let betas: Vec<f64> = (0..n)
            .map(|i| cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (n - 1) as f64)
            .collect();
        let s = Self::from_betas(betas);
        if !s.alpha_bar.last().is_some_and(|a| a.is_normal()) {
            return Err(Error::Config(format!(
                "alpha_bar underflows over {n} steps with betas {} .. {}",
                cfg.beta_start, cfg.beta_end
            )));
        }
        Ok(s)
    }

    fn from_betas(betas: Vec<f64>) -> Self {
        let mut acc = 1.0;
        let alpha_bar = betas
            .iter()
            .map(|b| {
                acc *= 1.0 - b;
                acc
            })
            .collect();
        Self { betas, alpha_bar }
    }

    pub fn num_steps(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        self.alpha_bar
            .get(t)
            .copied()
            .ok_or_else(|| Error::invalid(format!("timestep {t} outside [0, {})", self.num_steps())))
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// `n` descending timesteps starting at `start` and spaced `(start+1)/n`
    /// apart; with `start = T-1` the first step is the pure-noise end.
    pub fn timesteps(&self, start: usize, n: usize) -> Result<Vec<usize>> {
        if n == 0 {
            return Err(Error::invalid("sampler needs at least one step"));
        }
        if start >= self.num_steps() {
            return Err(Error::invalid(format!("start step {start} outside schedule")));
        }
        if n > start + 1 {
            return Err(Error::invalid(format!("{n} steps exceed the {} available", start + 1)));
        }
        Ok((0..n).map(|i| start - i * (start + 1) / n).collect())
    }
}

/// `sqrt(ab) * x0 + sqrt(1 - ab) * eps` for an explicit cumulative alpha.
pub fn add_noise_with(x0: &Tensor, eps: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if x0.shape() != eps.shape() {
        return Err(Error::shape(format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape())));
    }
    let a = x0.affine(alpha_bar.sqrt(), 0.0)?;
    let b = eps.affine((1.0 - alpha_bar).sqrt(), 0.0)?;
    Ok((a + b)?)
}

pub fn add_noise(schedule: &NoiseSchedule, x0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    add_noise_with(x0, eps, schedule.alpha_bar(t)?)
}

/// Noise-prediction model with a text-context input.
pub trait Denoiser {
    fn predict_eps(&self, xt: &Tensor, t: usize, text: &Tensor) -> Result<Tensor>;
}

impl<F> Denoiser for F
where
    F: Fn(&Tensor, usize, &Tensor) -> Result<Tensor>,
{
    fn predict_eps(&self, xt: &Tensor, t: usize, text: &Tensor) -> Result<Tensor> {
        self(xt, t, text)
    }
}

#[derive(Clone, Debug)]
pub struct Guidance {
    pub scale: f64,
    pub cond: Tensor,
    pub uncond: Tensor,
}

/// `(1 - s) * uncond + s * cond`, i.e. `uncond + s * (cond - uncond)` written
/// so that s = 0 and s = 1 return the respective prediction exactly.
pub fn combine_guidance(cond_pred: &Tensor, uncond_pred: &Tensor, scale: f64) -> Result<Tensor> {
    if !scale.is_finite() {
        return Err(Error::invalid("guidance scale must be finite"));
    }
    Ok((uncond_pred.affine(1.0 - scale, 0.0)? + cond_pred.affine(scale, 0.0)?)?)
}

pub fn guided_prediction<M: Denoiser + ?Sized>(
    model: &M,
    xt: &Tensor,
    t: usize,
    cond: &Tensor,
    uncond: &Tensor,
    scale: f64,
) -> Result<Tensor> {
    let c = model.predict_eps(xt, t, cond)?;
    let u = model.predict_eps(xt, t, uncond)?;
    combine_guidance(&c, &u, scale)
}

fn all_finite(x: &Tensor) -> Result<bool> {
    let s = x.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
    Ok(s.is_finite())
}

/// Deterministic reverse loop from pure noise (timestep T-1).
pub fn sample<M: Denoiser + ?Sized>(
    model: &M,
    init_noise: &Tensor,
    schedule: &NoiseSchedule,
    guidance: &Guidance,
    steps: usize,
    clip_x0: Option<f64>,
) -> Result<Tensor> {
    sample_from(model, init_noise, schedule, guidance, schedule.num_steps() - 1, steps, clip_x0)
}

/// Deterministic reverse loop starting from a latent already noised to `start`.
/// The final step returns the clean estimate directly. With `clip_x0` the
/// clean estimate is clamped to `[-c, c]` at every step and the noise
/// re-derived from it, which keeps an imperfect predictor from blowing up
/// through the `1/sqrt(alpha_bar)` factor at high noise.
pub fn sample_from<M: Denoiser + ?Sized>(
    model: &M,
    x_start: &Tensor,
    schedule: &NoiseSchedule,
    guidance: &Guidance,
    start: usize,
    steps: usize,
    clip_x0: Option<f64>,
) -> Result<Tensor> {
    if let Some(c) = clip_x0 {
        if !(c > 0.0 && c.is_finite()) {
            return Err(Error::invalid(format!("x0 clip {c} must be positive")));
        }
    }
    let ts = schedule.timesteps(start, steps)?;
    let mut x = x_start.clone();
    for (i, &t) in ts.iter().enumerate() {
        let mut eps = guided_prediction(model, &x, t, &guidance.cond, &guidance.uncond, guidance.scale)?;
        let ab = schedule.alpha_bar(t)?;
        let mut x0 = (&x - eps.affine((1.0 - ab).sqrt(), 0.0)?)?.affine(1.0 / ab.sqrt(), 0.0)?;
        if let Some(c) = clip_x0 {
            x0 = x0.clamp(-c, c)?;
            eps = (&x - x0.affine(ab.sqrt(), 0.0)?)?.affine(1.0 / (1.0 - ab).sqrt(), 0.0)?;
        }
        x = match ts.get(i + 1) {
            None => x0,
            Some(&prev) => {
                let ab_prev = schedule.alpha_bar(prev)?;
                (x0.affine(ab_prev.sqrt(), 0.0)? + eps.affine((1.0 - ab_prev).sqrt(), 0.0)?)?
            }
        };
        if !all_finite(&x)? {
            return Err(Error::NonFinite { step: i, timestep: t });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::gaussian;
    use candle_core::Device;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::linear(&ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn schedule_invariants() {
        let s = sched();
        assert_eq!(s.num_steps(), 1000);
        assert!(s.betas().iter().all(|&b| b > 0.0 && b < 1.0));
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bar(0).unwrap() >= 0.99);
        assert!(s.alpha_bar(1000).is_err());
    }

    #[test]
    fn add_noise_limits() {
        let dev = Device::Cpu;
        let x0 = gaussian(1, &[2, 3], DType::F32, &dev).unwrap();
        let eps = gaussian(2, &[2, 3], DType::F32, &dev).unwrap();
        let v = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v(&add_noise_with(&x0, &eps, 1.0).unwrap()), v(&x0));
        assert_eq!(v(&add_noise_with(&x0, &eps, 0.0).unwrap()), v(&eps));
        let bad = gaussian(2, &[3, 2], DType::F32, &dev).unwrap();
        assert!(add_noise_with(&x0, &bad, 0.5).is_err());
        assert!(add_noise(&sched(), &x0, 1000, &eps).is_err());
    }

    #[test]
    fn guidance_algebra() {
        let dev = Device::Cpu;
        let c = gaussian(3, &[4, 5], DType::F32, &dev).unwrap();
        let u = gaussian(4, &[4, 5], DType::F32, &dev).unwrap();
        let v = |t: &Tensor| t.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v(&combine_guidance(&c, &u, 0.0).unwrap()), v(&u));
        assert_eq!(v(&combine_guidance(&c, &u, 1.0).unwrap()), v(&c));
        let one = Tensor::new(&[1f32], &dev).unwrap();
        let zero = Tensor::new(&[0f32], &dev).unwrap();
        assert_eq!(v(&combine_guidance(&one, &zero, 2.0).unwrap()), vec![2.0]);
    }

    #[test]
    fn timesteps_trailing() {
        let s = sched();
        let ts = s.timesteps(999, 25).unwrap();
        assert_eq!(ts.len(), 25);
        assert_eq!(ts[0], 999);
        assert_eq!(*ts.last().unwrap(), 39);
        assert_eq!(s.timesteps(999, 1).unwrap(), vec![999]);
        assert_eq!(s.timesteps(499, 13).unwrap()[0], 499);
        assert!(s.timesteps(999, 0).is_err());
    }

    #[test]
    fn zero_steps_is_an_error() {
        let dev = Device::Cpu;
        let x = gaussian(0, &[1, 4], DType::F32, &dev).unwrap();
        let zero = |xt: &Tensor, _t: usize, _c: &Tensor| Ok(xt.zeros_like()?);
        let g = Guidance {
            scale: 1.0,
            cond: x.clone(),
            uncond: x.clone(),
        };
        assert!(sample(&zero, &x, &sched(), &g, 0, None).is_err());
    }

    #[test]
    fn non_finite_reports_step() {
        let dev = Device::Cpu;
        let x = gaussian(0, &[1, 4], DType::F32, &dev).unwrap();
        let nan = |xt: &Tensor, t: usize, _c: &Tensor| {
            if t < 900 {
                Ok(xt.affine(f64::NAN, 0.0)?)
            } else {
                Ok(xt.zeros_like()?)
            }
        };
        let g = Guidance {
            scale: 1.0,
            cond: x.clone(),
            uncond: x.clone(),
        };
        match sample(&nan, &x, &sched(), &g, 10, None) {
            Err(Error::NonFinite { step, timestep }) => assert_eq!((step, timestep), (1, 899)),
            other => panic!("expected NonFinite, got {other:?}"),
        }
    }
}
