use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

#[inline]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Branch keeps exp() from overflowing for large |v|.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub fn tanh<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(T::tanh)
}

/// `(outer, len, inner)` such that `axis` has extent `len`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Softmax along `axis`, with the running maximum subtracted before `exp`.
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(Error::Invalid(format!(
            "softmax: axis {axis} out of range for rank {}",
            x.ndim()
        )));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut m = T::neg_infinity();
            for k in 0..len {
                m = m.max(src[base + k * inner]);
            }
            let mut s = T::zero();
            for k in 0..len {
                let e = (src[base + k * inner] - m).exp();
                out[base + k * inner] = e;
                s += e;
            }
            let inv = T::one() / s;
            for k in 0..len {
                out[base + k * inner] *= inv;
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Adjoint of softmax given its output `y`: `dx = y ⊙ (g − Σ g ⊙ y)`.
pub(crate) fn softmax_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>, axis: usize) -> Tensor<T> {
    let (outer, len, inner) = split_axis(y.shape(), axis);
    let (yd, gd) = (y.data(), grad.data());
    let mut out = vec![T::zero(); yd.len()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for k in 0..len {
                dot += yd[base + k * inner] * gd[base + k * inner];
            }
            for k in 0..len {
                let j = base + k * inner;
                out[j] = yd[j] * (gd[j] - dot);
            }
        }
    }
    Tensor::new(y.shape().to_vec(), out).expect("shape preserved")
}
