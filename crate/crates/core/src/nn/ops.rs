//! Stateless activations and pooling with explicit backward helpers.

use super::{Float, Tensor};
use crate::error::{Error, Result};

pub fn relu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    y
}

/// Gradient of ReLU given its output.
pub fn relu_backward<T: Float>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let mut g = grad.clone();
    for (d, &o) in g.data_mut().iter_mut().zip(y.data()) {
        if o <= T::zero() {
            *d = T::zero();
        }
    }
    g
}

pub fn sigmoid<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    let mut y = x.clone();
    for v in y.data_mut() {
        *v = sigmoid_scalar(*v);
    }
    y
}

pub(crate) fn sigmoid_scalar<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Gradient of the logistic function given its output.
pub fn sigmoid_backward<T: Float>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let mut g = grad.clone();
    for (d, &o) in g.data_mut().iter_mut().zip(y.data()) {
        *d *= o * (T::one() - o);
    }
    g
}

/// Mean over the last axis: `N × C × L -> N × C`.
pub fn global_avg_pool<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank(3, "global_avg_pool")?;
    let (n, c, l) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if l == 0 {
        return Err(Error::validation("global_avg_pool: empty length axis"));
    }
    let inv = T::of(l as f64);
    let data = x.data().chunks(l).map(|row| row.iter().copied().sum::<T>() / inv).collect();
    Tensor::from_vec(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Float>(grad: &Tensor<T>, len: usize) -> Tensor<T> {
    let (n, c) = (grad.shape()[0], grad.shape()[1]);
    let scale = T::one() / T::of(len as f64);
    let mut out = Vec::with_capacity(n * c * len);
    for &g in grad.data() {
        out.extend(std::iter::repeat_n(g * scale, len));
    }
    Tensor::from_vec(&[n, c, len], out).expect("pool backward shape")
}
