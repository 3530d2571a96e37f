use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Affine map `x·Wᵀ + b` over the last axis of `x`; leading axes are batch axes.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let [m, n] = weight.dims::<2>("linear")?;
    let k = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("linear", "input has rank 0"))?;
    check_dim("linear", "features", n, k)?;
    if let Some(b) = bias {
        check_dim("linear", "bias", m, b.numel())?;
    }
    let rows = x.numel() / n.max(1);
    let (xd, wd) = (x.data(), weight.data());
    let mut out = vec![T::zero(); rows * m];
    if m > 0 {
        out.par_chunks_mut(m).enumerate().for_each(|(r, orow)| {
            let xrow = &xd[r * n..][..n];
            for (j, o) in orow.iter_mut().enumerate() {
                let wrow = &wd[j * n..][..n];
                let mut acc = bias.map_or(T::zero(), |b| b.data()[j]);
                for (&a, &w) in xrow.iter().zip(wrow) {
                    acc += a * w;
                }
                *o = acc;
            }
        });
    }
    let mut shape = x.shape().to_vec();
    *shape.last_mut().expect("rank checked") = m;
    Tensor::new(shape, out)
}

pub(crate) struct LinearGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad: &Tensor<T>,
    needs: [bool; 3],
) -> LinearGrads<T> {
    let (m, n) = (weight.dim(0), weight.dim(1));
    let rows = x.numel() / n.max(1);
    let (xd, wd, gd) = (x.data(), weight.data(), grad.data());

    let input = needs[0].then(|| {
        let mut gx = vec![T::zero(); rows * n];
        if n > 0 {
            gx.par_chunks_mut(n).enumerate().for_each(|(r, gxrow)| {
                let grow = &gd[r * m..][..m];
                for (j, &g) in grow.iter().enumerate() {
                    for (o, &w) in gxrow.iter_mut().zip(&wd[j * n..][..n]) {
                        *o += g * w;
                    }
                }
            });
        }
        Tensor::new(x.shape().to_vec(), gx).expect("input shape")
    });

    let weight_grad = needs[1].then(|| {
        let mut gw = vec![T::zero(); m * n];
        if n > 0 {
            gw.par_chunks_mut(n).enumerate().for_each(|(j, gwrow)| {
                for r in 0..rows {
                    let g = gd[r * m + j];
                    for (o, &a) in gwrow.iter_mut().zip(&xd[r * n..][..n]) {
                        *o += g * a;
                    }
                }
            });
        }
        Tensor::new(vec![m, n], gw).expect("weight shape")
    });

    let bias = needs[2].then(|| {
        let mut gb = vec![T::zero(); m];
        for r in 0..rows {
            for (o, &g) in gb.iter_mut().zip(&gd[r * m..][..m]) {
                *o += g;
            }
        }
        Tensor::new(vec![m], gb).expect("bias shape")
    });

    LinearGrads {
        input,
        weight: weight_grad,
        bias,
    }
}
