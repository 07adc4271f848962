//! Fully connected layer, ReLU and softmax cross-entropy.

use super::{gemm, Element, Mat, Tensor};
use crate::error::{Error, Result};

fn flat_dims<T: Element>(x: &Tensor<T>) -> Result<(usize, usize)> {
    let b = *x
        .shape()
        .first()
        .ok_or_else(|| Error::Config("linear layer needs a batch axis".into()))?;
    let d = if b == 0 { 0 } else { x.numel() / b };
    Ok((b, d))
}

/// `y = x·Wᵀ + b`, flattening every axis of `x` after the first.
///
/// `weight` is `[O, D]` and the result is `[B, O]`.
pub fn linear<T: Element>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, d) = flat_dims(x)?;
    let (o, wd) = match weight.shape() {
        &[o, wd] => (o, wd),
        s => return Err(Error::Config(format!("linear weight must be rank 2, got {s:?}"))),
    };
    if wd != d || bias.numel() != o {
        return Err(Error::Config(format!(
            "linear layer expects {wd} inputs and {o} biases, got {d} inputs and {} biases",
            bias.numel()
        )));
    }
    let mut out = Vec::with_capacity(b * o);
    for _ in 0..b {
        out.extend_from_slice(bias.data());
    }
    gemm(x.data(), Mat::new(b, d), weight.data(), Mat::t(o, d), T::one(), &mut out);
    Tensor::new(vec![b, o], out)
}

/// Backward pass of [`linear`]; accumulates into `d_weight` / `d_bias`.
pub fn linear_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    d_weight: &mut [T],
    d_bias: &mut [T],
    want_dx: bool,
) -> Result<Option<Tensor<T>>> {
    let (b, d) = flat_dims(x)?;
    let o = weight.shape()[0];
    if dy.shape() != [b, o] || d_weight.len() != o * d || d_bias.len() != o {
        return Err(Error::Config("linear backward shape mismatch".into()));
    }
    gemm(dy.data(), Mat::t(b, o), x.data(), Mat::new(b, d), T::one(), d_weight);
    for (j, db) in d_bias.iter_mut().enumerate() {
        let s: f64 = (0..b).map(|i| dy.data()[i * o + j].as_f64()).sum();
        *db = *db + T::from_f64(s);
    }
    if !want_dx {
        return Ok(None);
    }
    let mut dx = vec![T::zero(); b * d];
    gemm(dy.data(), Mat::new(b, o), weight.data(), Mat::new(o, d), T::zero(), &mut dx);
    Ok(Some(Tensor::new(x.shape().to_vec(), dx)?))
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let data = x.data().iter().map(|v| v.max(T::zero())).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// [`relu`] without allocating.
pub fn relu_inplace<T: Element>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        *v = v.max(T::zero());
    }
}

/// [`relu_backward`] written into `dy`.
pub fn relu_backward_inplace<T: Element>(y: &Tensor<T>, dy: &mut Tensor<T>) -> Result<()> {
    if y.shape() != dy.shape() {
        return Err(Error::Config("relu gradient shape mismatch".into()));
    }
    for (g, v) in dy.data_mut().iter_mut().zip(y.data()) {
        if !(*v > T::zero()) {
            *g = T::zero();
        }
    }
    Ok(())
}

/// Gradient of ReLU given its *output* `y` (positive exactly where the input was).
pub fn relu_backward<T: Element>(y: &Tensor<T>, dy: &Tensor<T>) -> Result<Tensor<T>> {
    if y.shape() != dy.shape() {
        return Err(Error::Config("relu gradient shape mismatch".into()));
    }
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(v, g)| if *v > T::zero() { *g } else { T::zero() })
        .collect();
    Tensor::new(y.shape().to_vec(), data)
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the logits.
///
/// `logits` is `[B, K]`; every label must lie in `0..K`.
pub fn softmax_cross_entropy<T: Element>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(f64, Tensor<T>)> {
    let (b, k) = match logits.shape() {
        &[b, k] => (b, k),
        s => return Err(Error::Config(format!("logits must be [B, K], got {s:?}"))),
    };
    if labels.len() != b {
        return Err(Error::Data(format!(
            "{} labels for a batch of {b}",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} outside 0..{k}")));
    }
    let mut loss = 0.0f64;
    let mut grad = Vec::with_capacity(b * k);
    let scale = 1.0 / b as f64;
    for (row, &label) in logits.data().chunks(k).zip(labels) {
        let m = row
            .iter()
            .map(|v| v.as_f64())
            .fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        loss += z.ln() + m - row[label].as_f64();
        for (j, e) in exps.iter().enumerate() {
            let p = e / z;
            let t = if j == label { 1.0 } else { 0.0 };
            grad.push(T::from_f64((p - t) * scale));
        }
    }
    Ok((loss * scale, Tensor::new(vec![b, k], grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_logits_give_ln5() {
        let logits = Tensor::<f32>::full(&[4, 5], 0.3);
        let (loss, _) = softmax_cross_entropy(&logits, &[0, 1, 2, 4]).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-6);
        assert!((loss - 1.6094).abs() < 1e-4);
    }

    #[test]
    fn large_margin_gives_zero_loss() {
        let mut v = vec![0.0f32; 10];
        v[3] = 100.0;
        v[5 + 1] = 100.0;
        let logits = Tensor::new(vec![2, 5], v).unwrap();
        let (loss, _) = softmax_cross_entropy(&logits, &[3, 1]).unwrap();
        assert!(loss < 1e-30);
    }

    #[test]
    fn matches_direct_formula_on_random_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let logits = Tensor::<f64>::uniform(&[3, 5], 4.0, &mut rng);
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..5)).collect();
        let (loss, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        // oracle: -log(softmax) evaluated directly, no max shift
        let mut expect = 0.0;
        for (i, l) in labels.iter().enumerate() {
            let row = &logits.data()[i * 5..(i + 1) * 5];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            expect -= (row[*l].exp() / z).ln();
        }
        expect /= 3.0;
        assert!((loss - expect).abs() < 1e-6);
    }

    #[test]
    fn out_of_range_label_is_data_error() {
        let logits = Tensor::<f32>::zeros(&[1, 5]);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[5]),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn linear_matches_manual_product() {
        let x = Tensor::<f64>::new(vec![2, 1, 1, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]).unwrap();
        let w = Tensor::<f64>::new(vec![2, 3], vec![1.0, 0.0, 1.0, 0.5, 0.5, 0.5]).unwrap();
        let b = Tensor::<f64>::new(vec![2], vec![0.1, -0.1]).unwrap();
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.shape(), &[2, 2]);
        let expect = [4.1, 2.9, 0.1, -0.1];
        for (a, e) in y.data().iter().zip(expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }

    #[test]
    fn relu_backward_masks_by_output() {
        let x = Tensor::<f32>::new(vec![4], vec![-1.0, 0.0, 2.0, 3.0]).unwrap();
        let y = relu(&x);
        assert_eq!(y.data(), &[0.0, 0.0, 2.0, 3.0]);
        let dx = relu_backward(&y, &Tensor::full(&[4], 1.0)).unwrap();
        assert_eq!(dx.data(), &[0.0, 0.0, 1.0, 1.0]);
    }
}
