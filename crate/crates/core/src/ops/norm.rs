//! Batch normalization over the channel axis (axis 1).

use crate::error::{check_dim, Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;

/// Per-channel statistics used to normalize.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub(crate) struct BatchNormOut<T> {
    pub y: Tensor<T>,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub stats: ChannelStats<T>,
}

fn layout<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize, usize)> {
    if x.ndim() < 2 {
        return Err(Error::shape("batch_norm", "input needs a channel axis"));
    }
    let (b, c) = (x.dim(0), x.dim(1));
    let inner = x.shape()[2..].iter().product();
    Ok((b, c, inner))
}

/// Normalizes with batch statistics when `fixed` is `None`, otherwise with
/// the given running statistics.
pub(crate) fn batch_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    fixed: Option<&ChannelStats<T>>,
) -> Result<BatchNormOut<T>> {
    let (b, c, inner) = layout(x)?;
    check_dim("batch_norm", "gamma", c, gamma.numel())?;
    check_dim("batch_norm", "beta", c, beta.numel())?;
    let n = b * inner;
    if fixed.is_none() && n < 2 {
        return Err(Error::shape(
            "batch_norm",
            "batch statistics need at least two values per channel",
        ));
    }
    let xd = x.data();
    let eps = T::of(BN_EPS);
    let stats = match fixed {
        Some(s) => {
            check_dim("batch_norm", "running_mean", c, s.mean.len())?;
            s.clone()
        }
        None => {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            let inv_n = T::one() / T::of(n as f64);
            for ch in 0..c {
                let mut s = T::zero();
                for bi in 0..b {
                    for &v in &xd[(bi * c + ch) * inner..][..inner] {
                        s += v;
                    }
                }
                let m = s * inv_n;
                let mut q = T::zero();
                for bi in 0..b {
                    for &v in &xd[(bi * c + ch) * inner..][..inner] {
                        q += (v - m) * (v - m);
                    }
                }
                mean[ch] = m;
                var[ch] = q * inv_n;
            }
            ChannelStats { mean, var }
        }
    };
    let inv_std: Vec<T> = stats.var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * inner;
            let (m, is, g, be) = (stats.mean[ch], inv_std[ch], gamma.data()[ch], beta.data()[ch]);
            for i in off..off + inner {
                let h = (xd[i] - m) * is;
                xhat[i] = h;
                y[i] = g * h + be;
            }
        }
    }
    Ok(BatchNormOut {
        y: Tensor::new(x.shape().to_vec(), y)?,
        xhat: Tensor::new(x.shape().to_vec(), xhat)?,
        inv_std,
        stats,
    })
}

pub(crate) fn batch_norm_backward<T: Scalar>(
    xhat: &Tensor<T>,
    inv_std: &[T],
    gamma: &Tensor<T>,
    grad: &Tensor<T>,
    batch_stats: bool,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (b, c, inner) = layout(xhat).expect("validated in forward");
    let n = T::of((b * inner) as f64);
    let (xh, gd) = (xhat.data(), grad.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for ch in 0..c {
        for bi in 0..b {
            let off = (bi * c + ch) * inner;
            for i in off..off + inner {
                dbeta[ch] += gd[i];
                dgamma[ch] += gd[i] * xh[i];
            }
        }
    }
    let mut dx = vec![T::zero(); gd.len()];
    for bi in 0..b {
        for ch in 0..c {
            let off = (bi * c + ch) * inner;
            let k = gamma.data()[ch] * inv_std[ch];
            for i in off..off + inner {
                dx[i] = if batch_stats {
                    k / n * (n * gd[i] - dbeta[ch] - xh[i] * dgamma[ch])
                } else {
                    k * gd[i]
                };
            }
        }
    }
    (
        Tensor::new(xhat.shape().to_vec(), dx).expect("shape"),
        Tensor::new(vec![c], dgamma).expect("shape"),
        Tensor::new(vec![c], dbeta).expect("shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batch_statistics_standardize_each_channel() {
        let x = Tensor::<f64>::from_fn(vec![2, 3, 2, 2], |i| (i as f64 * 1.7).sin() * 4.0 + 1.0);
        let out = batch_norm(&x, &Tensor::ones(vec![3]), &Tensor::zeros(vec![3]), None).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| (0..4).map(move |i| (b, i)))
                .map(|(b, i)| out.y.data()[(b * 3 + ch) * 4 + i])
                .collect();
            let mean = vals.iter().sum::<f64>() / 8.0;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn single_value_per_channel_is_rejected_in_training() {
        let x = Tensor::<f64>::zeros(vec![1, 2, 1, 1]);
        assert!(batch_norm(&x, &Tensor::ones(vec![2]), &Tensor::zeros(vec![2]), None).is_err());
    }
}
