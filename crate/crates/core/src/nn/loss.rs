use serde::{Deserialize, Serialize};

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParams {
    /// Weight of the cross-entropy term; `1 - alpha` weights the squared error.
    pub alpha: f64,
}

impl Default for LossParams {
    fn default() -> Self {
        Self { alpha: 0.8 }
    }
}

fn check_shapes<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(Error::validation(format!(
            "loss shape mismatch: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    if pred.numel() == 0 {
        return Err(Error::validation("loss over an empty tensor"));
    }
    Ok(())
}

/// Per-element `alpha * BCE + (1 - alpha) * squared error`, averaged over
/// every element. With rows of equal length this equals the batch mean of
/// `alpha * BCE_i + (1 - alpha) * MSE_i`. Returns the loss and `dL/dpred`.
pub fn combined_seg_loss<T: Float>(pred: &Tensor<T>, target: &Tensor<T>, alpha: f64) -> Result<(T, Tensor<T>)> {
    check_shapes(pred, target)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::validation(format!("alpha {alpha} outside [0, 1]")));
    }
    let lo = T::of(PROB_CLAMP);
    let hi = T::one() - lo;
    let a = T::of(alpha);
    let b = T::one() - a;
    let m = T::of(pred.numel() as f64);
    let mut total = T::zero();
    let mut grad = Tensor::zeros(pred.shape());
    for ((&p, &y), g) in pred.data().iter().zip(target.data()).zip(grad.data_mut()) {
        let pc = p.max(lo).min(hi);
        let bce = -(y * pc.ln() + (T::one() - y) * (T::one() - pc).ln());
        let se = (pc - y) * (pc - y);
        total += a * bce + b * se;
        if p > lo && p < hi {
            let dbce = -y / pc + (T::one() - y) / (T::one() - pc);
            *g = (a * dbce + b * T::of(2.0) * (pc - y)) / m;
        }
    }
    Ok((total / m, grad))
}

/// Mean binary cross-entropy over every element.
pub fn bce_loss<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    combined_seg_loss(pred, target, 1.0)
}

/// Mean squared error over every element.
pub fn mse_loss<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(T, Tensor<T>)> {
    check_shapes(pred, target)?;
    let m = T::of(pred.numel() as f64);
    let mut total = T::zero();
    let mut grad = Tensor::zeros(pred.shape());
    for ((&p, &y), g) in pred.data().iter().zip(target.data()).zip(grad.data_mut()) {
        total += (p - y) * (p - y);
        *g = T::of(2.0) * (p - y) / m;
    }
    Ok((total / m, grad))
}
