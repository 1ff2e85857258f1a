//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use refsketch::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize], dtype: DType) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Ok(Tensor::from_vec(v, shape, &Device::Cpu)?)
}

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

/// Largest relative error between the autodiff gradient of `f` at `x` and
/// central differences, over `samples` coordinates chosen by `rng`. The
/// denominator has a floor of 1e-6 so coordinates with a vanishing
/// gradient are compared absolutely.
pub fn max_grad_error(
    f: &dyn Fn(&Tensor) -> Result<Tensor>,
    x: &Tensor,
    samples: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let step = 1e-4;
    let var = candle_core::Var::from_tensor(x)?;
    let y = f(var.as_tensor())?;
    let grads = y.backward()?;
    let analytic = match grads.get(var.as_tensor()) {
        Some(g) => values(g),
        None => vec![0.0; x.elem_count()],
    };
    let base = values(x);
    let n = base.len();
    let mut worst: f64 = 0.0;
    for s in 0..samples.min(n) {
        let i = if samples >= n { s } else { rng.random_range(0..n) };
        let eval = |delta: f64| -> Result<f64> {
            let mut v = base.clone();
            v[i] += delta;
            let t = Tensor::from_vec(v, x.dims(), &Device::Cpu)?;
            Ok(f(&t)?.to_scalar::<f64>()?)
        };
        let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
        let err = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    Ok(worst)
}
