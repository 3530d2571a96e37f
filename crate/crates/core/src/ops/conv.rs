//! Direct 2-D convolution over `[B, C, T, F]` tensors.
//!
//! Cross-correlation convention: the kernel is not flipped, so
//! `y[b,o,t,f] = bias[o] + Σ_{c,i,j} w[o,c,i,j] · x[b,c,t·s_t+i−p_t, f·s_f+j−p_f]`
//! with zero padding.

use rayon::prelude::*;

use crate::error::{check_dim, Error, Result};
use crate::ops::gemm::{gemm, Gemm};
use crate::tensor::{Scalar, Tensor};

/// Output extent of a strided, padded window sweep.
pub fn conv_out_len(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Output indices `o` in `[lo, hi)` for which `o·stride + offset` lands inside `[0, in_len)`.
#[inline]
pub(crate) fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset + s - 1) / s) as usize
    };
    let last = in_len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last / s) as usize + 1).min(out_len);
    (lo.min(hi), hi)
}

struct Geometry {
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: (usize, usize),
    pad: (usize, usize),
}

fn geometry<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Geometry> {
    const OP: &str = "conv2d";
    let [b, cin, h, w] = input.dims::<4>(OP)?;
    let [cout, wcin, kh, kw] = weight.dims::<4>(OP)?;
    check_dim(OP, "in_channels", cin, wcin)?;
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::Invalid("conv2d: stride must be at least 1".into()));
    }
    if kh == 0 || kw == 0 {
        return Err(Error::shape(OP, "empty kernel"));
    }
    if kh > h + 2 * padding.0 {
        return Err(Error::Dim {
            op: OP,
            axis: "time",
            expected: h + 2 * padding.0,
            actual: kh,
        });
    }
    if kw > w + 2 * padding.1 {
        return Err(Error::Dim {
            op: OP,
            axis: "frequency",
            expected: w + 2 * padding.1,
            actual: kw,
        });
    }
    Ok(Geometry {
        b,
        cin,
        cout,
        h,
        w,
        kh,
        kw,
        oh: conv_out_len(h, kh, stride.0, padding.0),
        ow: conv_out_len(w, kw, stride.1, padding.1),
        stride,
        pad: padding,
    })
}

impl Geometry {
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == (1, 1) && self.pad == (0, 0)
    }

    /// Rows of the unfolded input: one per (input channel, kernel tap).
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
}

/// Unfolds one batch item `[cin, h, w]` into `[cin·kh·kw, oh·ow]`.
fn im2col<T: Scalar>(x: &[T], g: &Geometry, cols: &mut [T]) {
    let ohw = g.oh * g.ow;
    for ci in 0..g.cin {
        let xin = &x[ci * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            let toff = ki as isize - g.pad.0 as isize;
            let (tlo, thi) = valid_range(g.oh, g.h, g.stride.0, toff);
            for kj in 0..g.kw {
                let foff = kj as isize - g.pad.1 as isize;
                let (flo, fhi) = valid_range(g.ow, g.w, g.stride.1, foff);
                let row = &mut cols[((ci * g.kh + ki) * g.kw + kj) * ohw..][..ohw];
                row.fill(T::zero());
                for ot in tlo..thi {
                    let it = ((ot * g.stride.0) as isize + toff) as usize;
                    let xrow = &xin[it * g.w..][..g.w];
                    let orow = &mut row[ot * g.ow..][..g.ow];
                    if g.stride.1 == 1 {
                        let start = (flo as isize + foff) as usize;
                        orow[flo..fhi].copy_from_slice(&xrow[start..start + (fhi - flo)]);
                    } else {
                        for (of, o) in orow.iter_mut().enumerate().take(fhi).skip(flo) {
                            *o = xrow[((of * g.stride.1) as isize + foff) as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[cin·kh·kw, oh·ow]` back onto `[cin, h, w]`.
fn col2im<T: Scalar>(cols: &[T], g: &Geometry, x: &mut [T]) {
    let ohw = g.oh * g.ow;
    for ci in 0..g.cin {
        let xin = &mut x[ci * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            let toff = ki as isize - g.pad.0 as isize;
            let (tlo, thi) = valid_range(g.oh, g.h, g.stride.0, toff);
            for kj in 0..g.kw {
                let foff = kj as isize - g.pad.1 as isize;
                let (flo, fhi) = valid_range(g.ow, g.w, g.stride.1, foff);
                let row = &cols[((ci * g.kh + ki) * g.kw + kj) * ohw..][..ohw];
                for ot in tlo..thi {
                    let it = ((ot * g.stride.0) as isize + toff) as usize;
                    let xrow = &mut xin[it * g.w..][..g.w];
                    let crow = &row[ot * g.ow..][..g.ow];
                    for (of, &v) in crow.iter().enumerate().take(fhi).skip(flo) {
                        xrow[((of * g.stride.1) as isize + foff) as usize] += v;
                    }
                }
            }
        }
    }
}

pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor<T>> {
    let g = geometry(input, weight, stride, padding)?;
    if let Some(bias) = bias {
        check_dim("conv2d", "bias", g.cout, bias.numel())?;
    }
    let x = input.data();
    let wt = weight.data();
    let in_item = g.cin * g.h * g.w;
    let ohw = g.oh * g.ow;
    let mut out = vec![T::zero(); g.b * g.cout * ohw];
    if ohw == 0 || g.cout == 0 {
        return Tensor::new(vec![g.b, g.cout, g.oh, g.ow], out);
    }
    out.par_chunks_mut(g.cout * ohw).enumerate().for_each(|(bi, item)| {
        let xb = &x[bi * in_item..][..in_item];
        let unfolded;
        let cols = if g.pointwise() {
            xb
        } else {
            let mut buf = vec![T::zero(); g.patch() * ohw];
            im2col(xb, &g, &mut buf);
            unfolded = buf;
            &unfolded[..]
        };
        gemm(Gemm::new(g.cout, g.patch(), ohw), wt, cols, item);
        if let Some(bias) = bias {
            for (plane, &b0) in item.chunks_mut(ohw).zip(bias.data()) {
                plane.iter_mut().for_each(|v| *v += b0);
            }
        }
    });
    Tensor::new(vec![g.b, g.cout, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub struct Conv2dGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: (usize, usize),
    padding: (usize, usize),
    needs: [bool; 3],
) -> Result<Conv2dGrads<T>> {
    let g = geometry(input, weight, stride, padding)?;
    let [gb, gc, goh, gow] = grad_out.dims::<4>("conv2d_backward")?;
    check_dim("conv2d_backward", "batch", g.b, gb)?;
    check_dim("conv2d_backward", "out_channels", g.cout, gc)?;
    check_dim("conv2d_backward", "time", g.oh, goh)?;
    check_dim("conv2d_backward", "frequency", g.ow, gow)?;

    let x = input.data();
    let wt = weight.data();
    let go = grad_out.data();
    let in_item = g.cin * g.h * g.w;
    let ohw = g.oh * g.ow;
    let out_plane = ohw;
    let patch = g.patch();

    // Per batch item: input gradient and this item's share of the weight
    // gradient. Shares are summed in batch order below, so the result does
    // not depend on how the items were scheduled.
    let per_item: Vec<(Vec<T>, Vec<T>)> = (0..g.b)
        .into_par_iter()
        .map(|bi| {
            let xb = &x[bi * in_item..][..in_item];
            let gob = &go[bi * g.cout * ohw..][..g.cout * ohw];
            let mut gi = Vec::new();
            if needs[0] {
                gi = vec![T::zero(); in_item];
                if g.pointwise() {
                    gemm(Gemm::new(patch, g.cout, ohw).trans_a(), wt, gob, &mut gi);
                } else {
                    let mut gcols = vec![T::zero(); patch * ohw];
                    gemm(Gemm::new(patch, g.cout, ohw).trans_a(), wt, gob, &mut gcols);
                    col2im(&gcols, &g, &mut gi);
                }
            }
            let mut gw = Vec::new();
            if needs[1] {
                gw = vec![T::zero(); g.cout * patch];
                let unfolded;
                let cols = if g.pointwise() {
                    xb
                } else {
                    let mut buf = vec![T::zero(); patch * ohw];
                    im2col(xb, &g, &mut buf);
                    unfolded = buf;
                    &unfolded[..]
                };
                gemm(Gemm::new(g.cout, ohw, patch).trans_b(), gob, cols, &mut gw);
            }
            (gi, gw)
        })
        .collect();

    let grad_input = needs[0].then(|| {
        let mut gi = Vec::with_capacity(g.b * in_item);
        for (part, _) in &per_item {
            gi.extend_from_slice(part);
        }
        Tensor::new(vec![g.b, g.cin, g.h, g.w], gi)
    });

    let grad_weight = needs[1].then(|| {
        let mut gw = vec![T::zero(); g.cout * patch];
        for (_, part) in &per_item {
            for (o, &v) in gw.iter_mut().zip(part) {
                *o += v;
            }
        }
        Tensor::new(vec![g.cout, g.cin, g.kh, g.kw], gw)
    });

    let grad_bias = needs[2].then(|| {
        let gbias: Vec<T> = (0..g.cout)
            .map(|co| {
                let mut acc = T::zero();
                for bi in 0..g.b {
                    for &v in &go[(bi * g.cout + co) * out_plane..][..out_plane] {
                        acc += v;
                    }
                }
                acc
            })
            .collect();
        Tensor::new(vec![g.cout], gbias)
    });

    Ok(Conv2dGrads {
        input: grad_input.transpose()?,
        weight: grad_weight.transpose()?,
        bias: grad_bias.transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_kernel_scales() {
        let x = Tensor::<f64>::ones(vec![1, 1, 3, 3]);
        let w = Tensor::from_f64(vec![1, 1, 1, 1], &[2.0]).unwrap();
        let y = conv2d(&x, &w, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn diagonal_kernel_sums_diagonal() {
        let x = Tensor::<f64>::from_f64(vec![1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_f64(vec![1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap();
        let y = conv2d(&x, &w, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[5.0]);
    }

    #[test]
    fn no_flip_convention() {
        // Kernel [1, 0] picks the left neighbour of each output position.
        let x = Tensor::<f64>::from_f64(vec![1, 1, 1, 3], &[1.0, 2.0, 3.0]).unwrap();
        let w = Tensor::from_f64(vec![1, 1, 1, 2], &[1.0, 0.0]).unwrap();
        let y = conv2d(&x, &w, None, (1, 1), (0, 0)).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn strided_output_extent() {
        let x = Tensor::<f32>::ones(vec![2, 3, 7, 8]);
        let w = Tensor::ones(vec![4, 3, 3, 2]);
        let y = conv2d(&x, &w, None, (2, 3), (1, 0)).unwrap();
        assert_eq!(y.shape(), &[2, 4, 4, 3]);
    }

    #[test]
    fn mismatched_channels_name_the_axis() {
        let x = Tensor::<f32>::ones(vec![1, 2, 4, 4]);
        let w = Tensor::ones(vec![1, 3, 3, 3]);
        let err = conv2d(&x, &w, None, (1, 1), (1, 1)).unwrap_err();
        assert!(err.to_string().contains("in_channels"), "{err}");
        let w = Tensor::ones(vec![1, 2, 9, 3]);
        let err = conv2d(&x, &w, None, (1, 1), (1, 1)).unwrap_err();
        assert!(err.to_string().contains("time"), "{err}");
    }

    #[test]
    fn valid_range_matches_bruteforce() {
        for out_len in 0..6 {
            for in_len in 0..6 {
                for stride in 1..4 {
                    for offset in -4isize..4 {
                        let (lo, hi) = valid_range(out_len, in_len, stride, offset);
                        let brute: Vec<usize> = (0..out_len)
                            .filter(|&o| {
                                let i = (o * stride) as isize + offset;
                                i >= 0 && (i as usize) < in_len
                            })
                            .collect();
                        let got: Vec<usize> = (lo..hi).collect();
                        assert_eq!(got, brute, "{out_len} {in_len} {stride} {offset}");
                    }
                }
            }
        }
    }
}
