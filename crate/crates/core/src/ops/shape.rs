//! Axis permutation, concatenation and single-axis reductions.

use crate::error::{Error, Result};
use crate::ops::activation::split_axis;
use crate::tensor::{strides, Scalar, Tensor};

pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.ndim();
    let mut seen = vec![false; rank];
    if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::Invalid(format!(
            "permute: {perm:?} is not a permutation of 0..{rank}"
        )));
    }
    let src_strides = strides(x.shape());
    let out_shape: Vec<usize> = perm.iter().map(|&p| x.dim(p)).collect();
    let walk: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let n = x.numel();
    let src = x.data();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += walk[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= walk[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out)
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

pub fn concat<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::Invalid("concat: no inputs".into()))?;
    if axis >= first.ndim() {
        return Err(Error::Invalid(format!("concat: axis {axis} out of range")));
    }
    for p in parts {
        let same = p.ndim() == first.ndim()
            && p.shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !same {
            return Err(Error::shape(
                "concat",
                format!("{:?} incompatible with {:?} on axis {axis}", p.shape(), first.shape()),
            ));
        }
    }
    let (outer, _, inner) = split_axis(first.shape(), axis);
    let total: usize = parts.iter().map(|p| p.dim(axis)).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.dim(axis) * inner;
            out.extend_from_slice(&p.data()[o * chunk..][..chunk]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

/// Splits `grad` of a concatenation back into pieces of the given extents.
pub(crate) fn split<T: Scalar>(grad: &Tensor<T>, axis: usize, extents: &[usize]) -> Vec<Tensor<T>> {
    let (outer, total, inner) = split_axis(grad.shape(), axis);
    debug_assert_eq!(total, extents.iter().sum::<usize>());
    let mut pieces: Vec<Vec<T>> = extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
    let g = grad.data();
    let mut off = 0;
    for _ in 0..outer {
        for (piece, &e) in pieces.iter_mut().zip(extents) {
            piece.extend_from_slice(&g[off..off + e * inner]);
            off += e * inner;
        }
    }
    pieces
        .into_iter()
        .zip(extents)
        .map(|(data, &e)| {
            let mut shape = grad.shape().to_vec();
            shape[axis] = e;
            Tensor::new(shape, data).expect("split shape")
        })
        .collect()
}

/// Sums (or averages) over `axis`, removing it.
pub fn reduce_axis<T: Scalar>(x: &Tensor<T>, axis: usize, mean: bool) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(Error::Invalid(format!("reduce: axis {axis} out of range")));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let scale = if mean {
        T::one() / T::of(len.max(1) as f64)
    } else {
        T::one()
    };
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for k in 0..len {
            let row = &src[(o * len + k) * inner..][..inner];
            for (acc, &v) in out[o * inner..][..inner].iter_mut().zip(row) {
                *acc += v;
            }
        }
    }
    if mean {
        out.iter_mut().for_each(|v| *v *= scale);
    }
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    Tensor::new(shape, out)
}

pub(crate) fn reduce_axis_backward<T: Scalar>(
    grad: &Tensor<T>,
    input_shape: &[usize],
    axis: usize,
    mean: bool,
) -> Tensor<T> {
    let (outer, len, inner) = split_axis(input_shape, axis);
    let scale = if mean {
        T::one() / T::of(len.max(1) as f64)
    } else {
        T::one()
    };
    let g = grad.data();
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        for _ in 0..len {
            out.extend(g[o * inner..][..inner].iter().map(|&v| v * scale));
        }
    }
    Tensor::new(input_shape.to_vec(), out).expect("input shape")
}
