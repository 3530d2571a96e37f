use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// Unpadded 2-D pooling over the last two axes of a `[B, C, T, F]` tensor.
pub fn pool2d<T: Scalar>(
    x: &Tensor<T>,
    mode: PoolMode,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<Tensor<T>> {
    pool2d_with_argmax(x, mode, window, stride).map(|(y, _)| y)
}

/// Global average over the last two axes, i.e. a full-extent window.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let [_, _, h, w] = x.dims::<4>("pool2d")?;
    pool2d(x, PoolMode::Avg, (h, w), (1, 1))
}

/// Pooling plus, for max mode, the flat in-plane offset of each selected input.
pub(crate) fn pool2d_with_argmax<T: Scalar>(
    x: &Tensor<T>,
    mode: PoolMode,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [b, c, h, w] = x.dims::<4>("pool2d")?;
    if window.0 == 0 || window.1 == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::Invalid("pool2d: window and stride must be positive".into()));
    }
    if window.0 > h || window.1 > w {
        return Err(Error::shape(
            "pool2d",
            format!("window {window:?} exceeds input extent ({h}, {w})"),
        ));
    }
    let oh = (h - window.0) / stride.0 + 1;
    let ow = (w - window.1) / stride.1 + 1;
    let in_plane = h * w;
    let out_plane = oh * ow;
    let inv = T::one() / T::of((window.0 * window.1) as f64);
    let mut out = vec![T::zero(); b * c * out_plane];
    let mut arg = vec![0usize; if mode == PoolMode::Max { out.len() } else { 0 }];
    let src = x.data();

    let compute = |plane_idx: usize, o: &mut [T], a: Option<&mut [usize]>| {
        let xin = &src[plane_idx * in_plane..][..in_plane];
        let mut a = a;
        for ot in 0..oh {
            for of in 0..ow {
                let t0 = ot * stride.0;
                let f0 = of * stride.1;
                match mode {
                    PoolMode::Avg => {
                        let mut s = T::zero();
                        for t in t0..t0 + window.0 {
                            for &v in &xin[t * w + f0..t * w + f0 + window.1] {
                                s += v;
                            }
                        }
                        o[ot * ow + of] = s * inv;
                    }
                    PoolMode::Max => {
                        let mut best = t0 * w + f0;
                        for t in t0..t0 + window.0 {
                            for f in f0..f0 + window.1 {
                                if xin[t * w + f] > xin[best] {
                                    best = t * w + f;
                                }
                            }
                        }
                        o[ot * ow + of] = xin[best];
                        if let Some(a) = a.as_deref_mut() {
                            a[ot * ow + of] = best;
                        }
                    }
                }
            }
        }
    };

    if out_plane > 0 {
        match mode {
            PoolMode::Avg => out
                .par_chunks_mut(out_plane)
                .enumerate()
                .for_each(|(i, o)| compute(i, o, None)),
            PoolMode::Max => out
                .par_chunks_mut(out_plane)
                .zip(arg.par_chunks_mut(out_plane))
                .enumerate()
                .for_each(|(i, (o, a))| compute(i, o, Some(a))),
        }
    }
    Ok((Tensor::new(vec![b, c, oh, ow], out)?, arg))
}

pub(crate) fn pool2d_backward<T: Scalar>(
    input_shape: &[usize],
    grad_out: &Tensor<T>,
    mode: PoolMode,
    window: (usize, usize),
    stride: (usize, usize),
    argmax: &[usize],
) -> Result<Tensor<T>> {
    let (h, w) = (input_shape[2], input_shape[3]);
    let [_, _, oh, ow] = grad_out.dims::<4>("pool2d_backward")?;
    let in_plane = h * w;
    let out_plane = oh * ow;
    let mut gi = vec![T::zero(); input_shape.iter().product()];
    let inv = T::one() / T::of((window.0 * window.1) as f64);
    let go = grad_out.data();
    if in_plane == 0 || out_plane == 0 {
        return Tensor::new(input_shape.to_vec(), gi);
    }
    gi.par_chunks_mut(in_plane).enumerate().for_each(|(p, plane)| {
        let g = &go[p * out_plane..][..out_plane];
        for ot in 0..oh {
            for of in 0..ow {
                let gv = g[ot * ow + of];
                match mode {
                    PoolMode::Avg => {
                        let (t0, f0) = (ot * stride.0, of * stride.1);
                        for t in t0..t0 + window.0 {
                            for v in &mut plane[t * w + f0..t * w + f0 + window.1] {
                                *v += gv * inv;
                            }
                        }
                    }
                    PoolMode::Max => plane[argmax[p * out_plane + ot * ow + of]] += gv,
                }
            }
        }
    });
    Tensor::new(input_shape.to_vec(), gi)
}
