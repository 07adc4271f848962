use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Plain SGD: `p ← p − lr·g` for every parameter holding a gradient.
///
/// Nothing is written if any gradient entry is non-finite.
pub fn sgd_step<T: Element>(params: &mut [Tensor<T>], lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {lr} must be finite and >= 0")));
    }
    for (i, p) in params.iter().enumerate() {
        if let Some(g) = p.grad() {
            if let Some(pos) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Divergence(format!(
                    "non-finite gradient in parameter {i} (shape {:?}) at element {pos}",
                    p.shape()
                )));
            }
        }
    }
    let step = T::from_f64(lr);
    for p in params.iter_mut() {
        let Some(g) = p.grad().map(|g| g.to_vec()) else {
            continue;
        };
        for (v, g) in p.data_mut().iter_mut().zip(g) {
            *v = *v - step * g;
        }
    }
    Ok(())
}
