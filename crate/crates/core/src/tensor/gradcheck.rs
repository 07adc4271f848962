//! Central finite-difference checks of every layer's backward pass.
//!
//! The numeric side only ever calls forward functions, in `f64`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::Result;

/// Perturbation used by every check.
pub const FD_STEP: f64 = 1e-3;
/// Largest acceptable relative error between analytic and numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub layer: String,
    pub max_rel_error: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < FD_TOLERANCE
    }
}

/// Central differences of `f` with respect to every element of `x`.
pub fn numeric_gradient(x: &Tensor<f64>, h: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.numel())
        .map(|i| {
            let orig = x.data()[i];
            probe.data_mut()[i] = orig + h;
            let up = f(&probe);
            probe.data_mut()[i] = orig - h;
            let down = f(&probe);
            probe.data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `max |a − n| / max(|a|, |n|)`, with a tiny floor so exact zeros compare cleanly.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

/// Random values at least `gap` apart, so max-pool winners never swap under ±h.
fn separated(shape: &[usize], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n)
        .map(|i| (i as f64 - n as f64 / 2.0) * gap + rng.gen_range(0.0..gap * 0.25))
        .collect();
    vals.shuffle(rng);
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Values bounded away from zero, so ReLU stays on one side under ±h.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let vals = (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), vals).unwrap()
}

/// Weighted sum `Σ y·r`, the scalar objective used to probe a layer.
fn project(y: &Tensor<f64>, r: &Tensor<f64>) -> f64 {
    y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn report(layer: &str, pairs: &[(&[f64], &[f64])]) -> GradCheckReport {
    let mut max = 0.0f64;
    let mut checked = 0;
    for (a, n) in pairs {
        max = max.max(max_relative_error(a, n));
        checked += a.len();
    }
    GradCheckReport {
        layer: layer.to_string(),
        max_rel_error: max,
        checked,
    }
}

fn check_conv(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = Tensor::<f64>::uniform(&[2, 2, 8, 8], 1.0, rng);
    let w = Tensor::<f64>::uniform(&[3, 2, 5, 5], 0.5, rng);
    let b = Tensor::<f64>::uniform(&[3], 0.5, rng);
    let y = conv2d_valid(&x, &w, &b)?;
    let r = Tensor::<f64>::uniform(y.shape(), 1.0, rng);
    let mut dw = vec![0.0; w.numel()];
    let mut db = vec![0.0; b.numel()];
    let dx = conv2d_valid_backward(&x, &w, &r, &mut dw, &mut db, true)?.unwrap();
    let nx = numeric_gradient(&x, FD_STEP, |x| project(&conv2d_valid(x, &w, &b).unwrap(), &r));
    let nw = numeric_gradient(&w, FD_STEP, |w| project(&conv2d_valid(&x, w, &b).unwrap(), &r));
    let nb = numeric_gradient(&b, FD_STEP, |b| project(&conv2d_valid(&x, &w, b).unwrap(), &r));
    Ok(report(
        "conv2d_valid",
        &[(dx.data(), &nx), (&dw, &nw), (&db, &nb)],
    ))
}

fn check_relu(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = away_from_zero(&[2, 2, 6, 6], rng);
    let r = Tensor::<f64>::uniform(x.shape(), 1.0, rng);
    let dx = relu_backward(&relu(&x), &r)?;
    let n = numeric_gradient(&x, FD_STEP, |x| project(&relu(x), &r));
    Ok(report("relu", &[(dx.data(), &n)]))
}

fn check_maxpool(rng: &mut ChaCha8Rng, stride: usize) -> Result<GradCheckReport> {
    let x = separated(&[2, 2, 8, 8], 0.01, rng);
    let (y, route) = maxpool2d(&x, 3, stride)?;
    let r = Tensor::<f64>::uniform(y.shape(), 1.0, rng);
    let dx = maxpool_backward(&route, &r)?;
    let n = numeric_gradient(&x, FD_STEP, |x| project(&maxpool2d(x, 3, stride).unwrap().0, &r));
    Ok(report(&format!("maxpool2d(3, stride {stride})"), &[(dx.data(), &n)]))
}

fn check_global_pool(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = separated(&[4, 2, 8, 8], 0.01, rng);
    let (y, route) = global_spatial_maxpool(&x)?;
    let r = Tensor::<f64>::uniform(y.shape(), 1.0, rng);
    let dx = maxpool_backward(&route, &r)?;
    let n = numeric_gradient(&x, FD_STEP, |x| {
        project(&global_spatial_maxpool(x).unwrap().0, &r)
    });
    Ok(report("global_spatial_maxpool", &[(dx.data(), &n)]))
}

fn check_scale_pool(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    // all scales drawn from one separated ladder, then split
    let all = separated(&[5, 1, 2, 4, 4], 0.01, rng);
    let per: usize = 2 * 4 * 4;
    let split = |t: &Tensor<f64>| -> Vec<Tensor<f64>> {
        (0..5)
            .map(|i| Tensor::new(vec![1, 2, 4, 4], t.data()[i * per..(i + 1) * per].to_vec()).unwrap())
            .collect()
    };
    let groups = ScaleGroups::contiguous(5, 2)?;
    let (ys, route) = scale_maxpool(&split(&all), &groups)?;
    let rs: Vec<Tensor<f64>> = ys
        .iter()
        .map(|y| Tensor::<f64>::uniform(y.shape(), 1.0, rng))
        .collect();
    let dxs = scale_maxpool_backward(&route, &rs)?;
    let analytic: Vec<f64> = dxs.iter().flat_map(|t| t.data().to_vec()).collect();
    let n = numeric_gradient(&all, FD_STEP, |t| {
        let (ys, _) = scale_maxpool(&split(t), &groups).unwrap();
        ys.iter().zip(&rs).map(|(y, r)| project(y, r)).sum()
    });
    Ok(report("scale_maxpool", &[(&analytic, &n)]))
}

fn check_linear(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let x = Tensor::<f64>::uniform(&[3, 2, 2, 2], 1.0, rng);
    let w = Tensor::<f64>::uniform(&[4, 8], 0.5, rng);
    let b = Tensor::<f64>::uniform(&[4], 0.5, rng);
    let y = linear(&x, &w, &b)?;
    let r = Tensor::<f64>::uniform(y.shape(), 1.0, rng);
    let mut dw = vec![0.0; w.numel()];
    let mut db = vec![0.0; 4];
    let dx = linear_backward(&x, &w, &r, &mut dw, &mut db, true)?.unwrap();
    let nx = numeric_gradient(&x, FD_STEP, |x| project(&linear(x, &w, &b).unwrap(), &r));
    let nw = numeric_gradient(&w, FD_STEP, |w| project(&linear(&x, w, &b).unwrap(), &r));
    let nb = numeric_gradient(&b, FD_STEP, |b| project(&linear(&x, &w, b).unwrap(), &r));
    Ok(report("linear", &[(dx.data(), &nx), (&dw, &nw), (&db, &nb)]))
}

fn check_xent(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let logits = Tensor::<f64>::uniform(&[4, 5], 2.0, rng);
    let labels: Vec<usize> = (0..4).map(|_| rng.gen_range(0..5)).collect();
    let (_, g) = softmax_cross_entropy(&logits, &labels)?;
    let n = numeric_gradient(&logits, FD_STEP, |l| {
        softmax_cross_entropy(l, &labels).unwrap().0
    });
    Ok(report("softmax_cross_entropy", &[(g.data(), &n)]))
}

/// Runs the finite-difference check for every layer type.
pub fn layer_suite(seed: u64) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(vec![
        check_conv(&mut rng)?,
        check_relu(&mut rng)?,
        check_maxpool(&mut rng, 1)?,
        check_maxpool(&mut rng, 2)?,
        check_global_pool(&mut rng)?,
        check_scale_pool(&mut rng)?,
        check_linear(&mut rng)?,
        check_xent(&mut rng)?,
    ])
}
