//! Central-difference gradient checks for scalar losses over [`Var`]s.

use candle_core::{DType, Tensor, Var};
use rand::Rng;

use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradSample {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradSample {
    /// `|a - n| / max(|a|, |n|, floor)`; the floor keeps vanishing
    /// gradients from turning rounding noise into a large ratio.
    pub fn rel_err(&self, floor: f64) -> f64 {
        let d = self.analytic.abs().max(self.numeric.abs()).max(floor);
        (self.analytic - self.numeric).abs() / d
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn set_element(var: &Var, index: usize, value: f64) -> Result<()> {
    let t = var.as_tensor();
    let mut flat = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
    flat[index] = value;
    let new = Tensor::from_vec(flat, t.shape(), t.device())?.to_dtype(t.dtype())?;
    var.set(&new)?;
    Ok(())
}

fn get_element(t: &Tensor, index: usize) -> Result<f64> {
    scalar(&t.flatten_all()?.get(index)?)
}

/// Compare analytic gradients of `loss` against central differences with
/// step `h` at the given `(name, var, flat index)` probes.
pub fn check<F>(loss: F, probes: &[(String, Var, usize)], h: f64) -> Result<Vec<GradSample>>
where
    F: Fn() -> Result<Tensor>,
{
    let grads = loss()?.backward()?;
    let mut out = Vec::with_capacity(probes.len());
    for (name, var, index) in probes {
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => get_element(g, *index)?,
            None => 0.0,
        };
        let x0 = get_element(var.as_tensor(), *index)?;
        set_element(var, *index, x0 + h)?;
        let up = scalar(&loss()?)?;
        set_element(var, *index, x0 - h)?;
        let down = scalar(&loss()?)?;
        set_element(var, *index, x0)?;
        out.push(GradSample {
            name: name.clone(),
            index: *index,
            analytic,
            numeric: (up - down) / (2.0 * h),
        });
    }
    Ok(out)
}

/// `count` random `(name, var, index)` probes drawn from `vars`.
pub fn random_probes<R: Rng>(vars: &[(String, Var)], count: usize, rng: &mut R) -> Vec<(String, Var, usize)> {
    (0..count)
        .map(|_| {
            let (name, var) = &vars[rng.random_range(0..vars.len())];
            let n = var.as_tensor().elem_count();
            (name.clone(), var.clone(), rng.random_range(0..n))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn quadratic_gradient() {
        let v = Var::from_vec(vec![1.0f64, -2.0, 0.5], 3, &Device::Cpu).unwrap();
        let loss = || Ok((v.as_tensor().sqr()?.sum_all()? * 0.5)?);
        let probes: Vec<_> = (0..3).map(|i| ("v".to_string(), v.clone(), i)).collect();
        for s in check(loss, &probes, 1e-4).unwrap() {
            assert!(s.rel_err(1e-8) < 1e-8, "{s:?}");
        }
    }
}
