//! Binary elementwise arithmetic with singleton-axis broadcasting.
//!
//! Operands of different rank are aligned on their trailing axes; each pair
//! of extents must be equal or contain a 1.

use crate::error::{Error, Result};
use crate::tensor::{strides, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

impl BinaryOp {
    #[inline]
    fn apply<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            BinaryOp::Add => a + b,
            BinaryOp::Sub => a - b,
            BinaryOp::Mul => a * b,
        }
    }
}

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; n - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    pa.iter()
        .zip(&pb)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Ok(x),
            (1, y) => Ok(y),
            (x, 1) => Ok(x),
            _ => Err(Error::shape(
                "broadcast",
                format!("shapes {a:?} and {b:?} are not broadcastable"),
            )),
        })
        .collect()
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let lead = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < lead || shape[i - lead] == 1 {
                0
            } else {
                own[i - lead]
            }
        })
        .collect()
}

/// Visits every output position with the matching flat offsets of `a` and `b`.
fn for_each_broadcast(out_shape: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n: usize = out_shape.iter().product();
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for flat in 0..n {
        f(flat, oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            oa -= sa[ax] * out_shape[ax];
            ob -= sb[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

pub fn binary<T: Scalar>(op: BinaryOp, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        return a.zip_map(b, |x, y| op.apply(x, y));
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let mut out = vec![T::zero(); out_shape.iter().product()];
    let (ad, bd) = (a.data(), b.data());
    for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| {
        out[o] = op.apply(ad[ia], bd[ib]);
    });
    Tensor::new(out_shape, out)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinaryOp::Add, a, b)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    binary(BinaryOp::Mul, a, b)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, factor: T) -> Tensor<T> {
    a.map(|v| v * factor)
}

/// Sums `grad` (shaped like the broadcast output) back down to `shape`.
pub(crate) fn reduce_to_shape<T: Scalar>(grad: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out_shape = grad.shape().to_vec();
    let s = broadcast_strides(shape, &out_shape);
    let zero = vec![0; out_shape.len()];
    let mut out = vec![T::zero(); shape.iter().product()];
    let g = grad.data();
    for_each_broadcast(&out_shape, &s, &zero, |o, i, _| out[i] += g[o]);
    Tensor::new(shape.to_vec(), out).expect("reduced shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_shape_mul() {
        let a = Tensor::<f64>::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap();
        let b = Tensor::from_f64(vec![3], &[2.0, 2.0, 2.0]).unwrap();
        assert_eq!(mul(&a, &b).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn broadcast_over_singletons() {
        let a = Tensor::<f64>::from_fn(vec![2, 3], |i| i as f64);
        let col = Tensor::from_f64(vec![2, 1], &[10.0, 20.0]).unwrap();
        let row = Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(add(&a, &col).unwrap().data(), &[10.0, 11.0, 12.0, 23.0, 24.0, 25.0]);
        assert_eq!(mul(&a, &row).unwrap().data(), &[0.0, 2.0, 6.0, 3.0, 8.0, 15.0]);
        let g = Tensor::<f64>::ones(vec![2, 3]);
        assert_eq!(reduce_to_shape(&g, &[2, 1]).data(), &[3.0, 3.0]);
        assert_eq!(reduce_to_shape(&g, &[3]).data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn incompatible_shapes_fail() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 2]);
        assert!(add(&a, &b).is_err());
    }
}
