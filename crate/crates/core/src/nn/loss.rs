//! Scalar losses returning `(loss, d loss / d output)`.

use super::tensor::Tensor;
use crate::{Error, Result};

const PROB_FLOOR: f64 = 1e-300;

/// Mean negative log-likelihood of `targets` under row-wise probabilities.
pub fn cross_entropy(probs: &Tensor, targets: &[usize]) -> Result<(f64, Tensor)> {
    let shape = probs.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Shape {
            layer: 0,
            expected: format!("[{}, K] probabilities", targets.len()),
            got: shape.to_vec(),
        });
    }
    let (n, k) = (shape[0], shape[1]);
    let mut grad = Tensor::zeros(shape);
    let mut loss = 0.0;
    for (s, &t) in targets.iter().enumerate() {
        if t >= k {
            return Err(Error::param("target", format!("class {t} >= {k}")));
        }
        let p = probs.data()[s * k + t].max(PROB_FLOOR);
        loss -= p.ln();
        grad.data_mut()[s * k + t] = -1.0 / (p * n as f64);
    }
    Ok((loss / n as f64, grad))
}

/// Mean Huber (smooth-L1, β = 1) loss.
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            layer: 0,
            expected: format!("{:?}", target.shape()),
            got: pred.shape().to_vec(),
        });
    }
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        let d = p - t;
        if d.abs() < 1.0 {
            loss += 0.5 * d * d;
            *g = d / n;
        } else {
            loss += d.abs() - 0.5;
            *g = d.signum() / n;
        }
    }
    Ok((loss / n, grad))
}

/// Mean squared error.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            layer: 0,
            expected: format!("{:?}", target.shape()),
            got: pred.shape().to_vec(),
        });
    }
    let n = pred.len() as f64;
    let mut grad = Tensor::zeros(pred.shape());
    let mut loss = 0.0;
    for ((g, &p), &t) in grad.data_mut().iter_mut().zip(pred.data()).zip(target.data()) {
        loss += (p - t).powi(2);
        *g = 2.0 * (p - t) / n;
    }
    Ok((loss / n, grad))
}
