//! Decoupled dynamic filtering.
//!
//! Every output position gets its own `K×K` depthwise kernel, formed as the
//! elementwise product of a *spatial* filter (indexed by frequency band, time
//! frame or pixel) and a *channel* filter (one per channel, shared by all
//! locations):
//!
//! ```text
//! y[b,c,t,f] = Σ_{i,j<K} S[b, ℓ(t,f), i·K+j] · C[b, c, i·K+j] · x̂[b, c, t+i−K/2, f+j−K/2]
//! ```
//!
//! with `x̂` zero-padded and `ℓ(t,f) = f`, `t` or `t·F+f`. Stride is 1 and the
//! output has the input's shape. There is no bias term.
//!
//! [`ddf_forward`] never materializes the `[L, C, K²]` product kernel. It
//! lays each batch item's spatial filters out once as `[K², T, F+K−1]`, then
//! for every plane runs one contiguous multiply-add per tap, scaled by that
//! plane's channel weight.
//! [`ddf_reference`] does materialize it and exists only as an oracle.

use rayon::prelude::*;

use crate::autograd::{Backward, Tape, Var};
use crate::error::{check_dim, Error, Result};
use crate::ops::conv::valid_range;
use crate::tensor::{Scalar, Tensor};

/// Which positions share a spatial filter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FilterAxis {
    /// One filter per frequency band, shared by all frames (FFDConv).
    Frequency,
    /// One filter per time frame, shared by all bands (FTDConv).
    Time,
    /// One filter per time-frequency bin (DDFConv).
    Pixel,
}

impl FilterAxis {
    pub const ALL: [FilterAxis; 3] = [FilterAxis::Frequency, FilterAxis::Time, FilterAxis::Pixel];

    /// Number of distinct spatial filters for a `T×F` plane.
    pub fn locations(self, frames: usize, bands: usize) -> usize {
        match self {
            FilterAxis::Frequency => bands,
            FilterAxis::Time => frames,
            FilterAxis::Pixel => frames * bands,
        }
    }

    #[inline]
    pub fn location(self, t: usize, f: usize, bands: usize) -> usize {
        match self {
            FilterAxis::Frequency => f,
            FilterAxis::Time => t,
            FilterAxis::Pixel => t * bands + f,
        }
    }
}

impl std::fmt::Display for FilterAxis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            FilterAxis::Frequency => "frequency",
            FilterAxis::Time => "time",
            FilterAxis::Pixel => "pixel",
        })
    }
}

/// Spatial filters, `values: [B, L, K²]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpatialFilterBank<T> {
    pub axis: FilterAxis,
    pub kernel_size: usize,
    pub values: Tensor<T>,
}

/// Channel filters, `values: [B, C, K²]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelFilterBank<T> {
    pub kernel_size: usize,
    pub values: Tensor<T>,
}

fn check_kernel_size(k: usize) -> Result<()> {
    if k % 2 == 1 {
        Ok(())
    } else {
        Err(Error::Invalid(format!("kernel size must be odd, got {k}")))
    }
}

impl<T: Scalar> SpatialFilterBank<T> {
    pub fn new(axis: FilterAxis, kernel_size: usize, values: Tensor<T>) -> Result<Self> {
        check_kernel_size(kernel_size)?;
        let [_, _, kk] = values.dims::<3>("spatial filter bank")?;
        check_dim("spatial filter bank", "kernel", kernel_size * kernel_size, kk)?;
        Ok(Self {
            axis,
            kernel_size,
            values,
        })
    }
}

impl<T: Scalar> ChannelFilterBank<T> {
    pub fn new(kernel_size: usize, values: Tensor<T>) -> Result<Self> {
        check_kernel_size(kernel_size)?;
        let [_, _, kk] = values.dims::<3>("channel filter bank")?;
        check_dim("channel filter bank", "kernel", kernel_size * kernel_size, kk)?;
        Ok(Self { kernel_size, values })
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    b: usize,
    c: usize,
    t: usize,
    f: usize,
    k: usize,
    l: usize,
    axis: FilterAxis,
}

impl Geometry {
    fn kk(&self) -> usize {
        self.k * self.k
    }

    fn pad(&self) -> isize {
        (self.k / 2) as isize
    }

    fn plane(&self) -> usize {
        self.t * self.f
    }
}

fn geometry<T: Scalar>(
    op: &'static str,
    input: &Tensor<T>,
    axis: FilterAxis,
    spatial: &Tensor<T>,
    channel: &Tensor<T>,
    k: usize,
) -> Result<Geometry> {
    check_kernel_size(k)?;
    let [b, c, t, f] = input.dims::<4>(op)?;
    let [sb, sl, skk] = spatial.dims::<3>(op)?;
    let [cb, cc, ckk] = channel.dims::<3>(op)?;
    check_dim(op, "kernel_size", k * k, skk)?;
    check_dim(op, "kernel_size", k * k, ckk)?;
    check_dim(op, "batch", b, sb)?;
    check_dim(op, "batch", b, cb)?;
    check_dim(op, "channel", c, cc)?;
    let l = axis.locations(t, f);
    check_dim(
        op,
        match axis {
            FilterAxis::Frequency => "frequency",
            FilterAxis::Time => "time",
            FilterAxis::Pixel => "pixel",
        },
        l,
        sl,
    )?;
    Ok(Geometry { b, c, t, f, k, l, axis })
}

/// Tap-major copy of one batch item's spatial filters: `[K², L]`.
fn taps_major<T: Scalar>(spatial: &[T], l: usize, kk: usize) -> Vec<T> {
    let mut out = vec![T::zero(); kk * l];
    for loc in 0..l {
        for tap in 0..kk {
            out[tap * l + loc] = spatial[loc * kk + tap];
        }
    }
    out
}

/// Fused forward pass.
pub fn ddf_forward<T: Scalar>(
    input: &Tensor<T>,
    spatial: &SpatialFilterBank<T>,
    channel: &ChannelFilterBank<T>,
) -> Result<Tensor<T>> {
    check_dim("ddf_forward", "kernel_size", spatial.kernel_size, channel.kernel_size)?;
    forward_raw(
        input,
        spatial.axis,
        &spatial.values,
        &channel.values,
        spatial.kernel_size,
    )
}

fn forward_raw<T: Scalar>(
    input: &Tensor<T>,
    axis: FilterAxis,
    spatial: &Tensor<T>,
    channel: &Tensor<T>,
    k: usize,
) -> Result<Tensor<T>> {
    let g = geometry("ddf_forward", input, axis, spatial, channel, k)?;
    let (kk, plane) = (g.kk(), g.plane());
    let mut out = vec![T::zero(); input.numel()];
    if plane == 0 {
        return Tensor::new(input.shape().to_vec(), out);
    }
    // Rows are laid out `fp` wide so that every tap becomes one contiguous
    // multiply-add over the whole plane; columns `f..fp` are scratch.
    let p = g.k / 2;
    let fp = g.f + 2 * p;
    let n = g.t * fp;
    let spread: Vec<Vec<T>> = (0..g.b)
        .map(|bi| spread_taps(&g, &spatial.data()[bi * g.l * kk..][..g.l * kk], fp))
        .collect();
    let x = input.data();
    let ch = channel.data();
    let padded_len = (g.t + 2 * p) * fp + 2 * p;
    out.par_chunks_mut(plane).enumerate().for_each_init(
        || (vec![T::zero(); padded_len], vec![T::zero(); n]),
        |(xp, yp), (idx, yplane)| {
            let (bi, ci) = (idx / g.c, idx % g.c);
            let xplane = &x[idx * plane..][..plane];
            let cw = &ch[(bi * g.c + ci) * kk..][..kk];
            for (t, row) in xplane.chunks_exact(g.f).enumerate() {
                xp[(t + p) * fp + p..][..g.f].copy_from_slice(row);
            }
            yp.fill(T::zero());
            accumulate_taps(yp, &spread[bi], xp, cw, g.k, fp);
            for (dst, src) in yplane.chunks_exact_mut(g.f).zip(yp.chunks_exact(fp)) {
                dst.copy_from_slice(&src[..g.f]);
            }
        },
    );
    Tensor::new(input.shape().to_vec(), out)
}

/// `y[m] += Σ_tap w[tap] · s[tap, m] · xp[m + i·fp + j]` over the whole plane.
#[inline(always)]
fn accumulate_taps_portable<T: Scalar>(y: &mut [T], spread: &[T], xp: &[T], w: &[T], k: usize, fp: usize) {
    let n = y.len();
    for i in 0..k {
        for j in 0..k {
            let tap = i * k + j;
            let wt = w[tap];
            let sp = &spread[tap * n..][..n];
            let xs = &xp[i * fp + j..][..n];
            for ((y, &s), &xv) in y.iter_mut().zip(sp).zip(xs) {
                *y += wt * s * xv;
            }
        }
    }
}

// Same arithmetic, no FMA contraction, so results are bit-identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn accumulate_taps_avx2<T: Scalar>(y: &mut [T], spread: &[T], xp: &[T], w: &[T], k: usize, fp: usize) {
    accumulate_taps_portable(y, spread, xp, w, k, fp)
}

fn accumulate_taps<T: Scalar>(y: &mut [T], spread: &[T], xp: &[T], w: &[T], k: usize, fp: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { accumulate_taps_avx2(y, spread, xp, w, k, fp) };
    }
    accumulate_taps_portable(y, spread, xp, w, k, fp)
}

/// One batch item's spatial filters as `[K², T, fp]`, zero in the scratch columns.
fn spread_taps<T: Scalar>(g: &Geometry, spatial: &[T], fp: usize) -> Vec<T> {
    let kk = g.kk();
    let n = g.t * fp;
    let mut out = vec![T::zero(); kk * n];
    for t in 0..g.t {
        for f in 0..g.f {
            let s = &spatial[g.axis.location(t, f, g.f) * kk..][..kk];
            for (tap, &v) in s.iter().enumerate() {
                out[tap * n + t * fp + f] = v;
            }
        }
    }
    out
}

/// Adjoints of [`ddf_forward`] w.r.t. input, spatial filters and channel filters.
#[derive(Clone, Debug)]
pub struct DdfGrads<T> {
    pub input: Tensor<T>,
    pub spatial: Tensor<T>,
    pub channel: Tensor<T>,
}

pub fn ddf_backward<T: Scalar>(
    input: &Tensor<T>,
    spatial: &SpatialFilterBank<T>,
    channel: &ChannelFilterBank<T>,
    grad_out: &Tensor<T>,
) -> Result<DdfGrads<T>> {
    check_dim("ddf_backward", "kernel_size", spatial.kernel_size, channel.kernel_size)?;
    backward_raw(
        input,
        spatial.axis,
        &spatial.values,
        &channel.values,
        spatial.kernel_size,
        grad_out,
    )
}

fn backward_raw<T: Scalar>(
    input: &Tensor<T>,
    axis: FilterAxis,
    spatial: &Tensor<T>,
    channel: &Tensor<T>,
    k: usize,
    grad_out: &Tensor<T>,
) -> Result<DdfGrads<T>> {
    let g = geometry("ddf_backward", input, axis, spatial, channel, k)?;
    if grad_out.shape() != input.shape() {
        return Err(Error::shape(
            "ddf_backward",
            format!(
                "grad_out shape {:?} != input shape {:?}",
                grad_out.shape(),
                input.shape()
            ),
        ));
    }
    let (kk, plane, pad) = (g.kk(), g.plane(), g.pad());
    let taps: Vec<Vec<T>> = (0..g.b)
        .map(|bi| taps_major(&spatial.data()[bi * g.l * kk..][..g.l * kk], g.l, kk))
        .collect();
    let x = input.data();
    let go = grad_out.data();
    let ch = channel.data();

    // Input and channel adjoints: one task per (b, c) plane.
    let mut gx = vec![T::zero(); input.numel()];
    let mut gch = vec![T::zero(); g.b * g.c * kk];
    if plane > 0 {
        gx.par_chunks_mut(plane)
            .zip(gch.par_chunks_mut(kk))
            .enumerate()
            .for_each(|(idx, (gxplane, gcrow))| {
                let bi = idx / g.c;
                let xplane = &x[idx * plane..][..plane];
                let gplane = &go[idx * plane..][..plane];
                let cw = &ch[idx * kk..][..kk];
                let st = &taps[bi];
                for i in 0..g.k {
                    let toff = i as isize - pad;
                    let (tlo, thi) = valid_range(g.t, g.t, 1, toff);
                    for j in 0..g.k {
                        let tap = i * g.k + j;
                        let foff = j as isize - pad;
                        let (flo, fhi) = valid_range(g.f, g.f, 1, foff);
                        if flo >= fhi {
                            continue;
                        }
                        let srow = &st[tap * g.l..][..g.l];
                        let w = cw[tap];
                        let xs = (flo as isize + foff) as usize;
                        let n = fhi - flo;
                        let mut acc = T::zero();
                        for t in tlo..thi {
                            let src = (t as isize + toff) as usize;
                            let grow = &gplane[t * g.f + flo..][..n];
                            let xrow = &xplane[src * g.f + xs..][..n];
                            let srange: &[T] = match g.axis {
                                FilterAxis::Frequency => &srow[flo..fhi],
                                FilterAxis::Time => &srow[t..t + 1],
                                FilterAxis::Pixel => &srow[t * g.f + flo..t * g.f + fhi],
                            };
                            let gxrow = &mut gxplane[src * g.f + xs..][..n];
                            if g.axis == FilterAxis::Time {
                                let s = srange[0];
                                let ws = w * s;
                                let mut dot = T::zero();
                                for ((gxv, &gv), &xv) in gxrow.iter_mut().zip(grow).zip(xrow) {
                                    *gxv += ws * gv;
                                    dot += gv * xv;
                                }
                                acc += s * dot;
                            } else {
                                for (((gxv, &gv), &xv), &s) in gxrow.iter_mut().zip(grow).zip(xrow).zip(srange) {
                                    *gxv += w * s * gv;
                                    acc += s * gv * xv;
                                }
                            }
                        }
                        gcrow[tap] = acc;
                    }
                }
            });
    }

    // Spatial adjoint: one task per batch item, channels summed in order.
    let mut gs_taps = vec![T::zero(); g.b * kk * g.l];
    if g.l > 0 {
        gs_taps.par_chunks_mut(kk * g.l).enumerate().for_each(|(bi, gst)| {
            for ci in 0..g.c {
                let idx = bi * g.c + ci;
                let xplane = &x[idx * plane..][..plane];
                let gplane = &go[idx * plane..][..plane];
                let cw = &ch[idx * kk..][..kk];
                for i in 0..g.k {
                    let toff = i as isize - pad;
                    let (tlo, thi) = valid_range(g.t, g.t, 1, toff);
                    for j in 0..g.k {
                        let tap = i * g.k + j;
                        let foff = j as isize - pad;
                        let (flo, fhi) = valid_range(g.f, g.f, 1, foff);
                        if flo >= fhi {
                            continue;
                        }
                        let w = cw[tap];
                        let xs = (flo as isize + foff) as usize;
                        let n = fhi - flo;
                        let grow_taps = &mut gst[tap * g.l..][..g.l];
                        for t in tlo..thi {
                            let src = (t as isize + toff) as usize;
                            let grow = &gplane[t * g.f + flo..][..n];
                            let xrow = &xplane[src * g.f + xs..][..n];
                            match g.axis {
                                FilterAxis::Frequency => {
                                    for ((acc, &gv), &xv) in grow_taps[flo..fhi].iter_mut().zip(grow).zip(xrow) {
                                        *acc += w * gv * xv;
                                    }
                                }
                                FilterAxis::Time => {
                                    let mut dot = T::zero();
                                    for (&gv, &xv) in grow.iter().zip(xrow) {
                                        dot += gv * xv;
                                    }
                                    grow_taps[t] += w * dot;
                                }
                                FilterAxis::Pixel => {
                                    for ((acc, &gv), &xv) in
                                        grow_taps[t * g.f + flo..t * g.f + fhi].iter_mut().zip(grow).zip(xrow)
                                    {
                                        *acc += w * gv * xv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    let mut gs = vec![T::zero(); g.b * g.l * kk];
    for bi in 0..g.b {
        for tap in 0..kk {
            for loc in 0..g.l {
                gs[(bi * g.l + loc) * kk + tap] = gs_taps[(bi * kk + tap) * g.l + loc];
            }
        }
    }

    Ok(DdfGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        spatial: Tensor::new(spatial.shape().to_vec(), gs)?,
        channel: Tensor::new(channel.shape().to_vec(), gch)?,
    })
}

/// Uniform random input and filter banks in `[-1, 1]`.
pub fn random_instance<T: Scalar>(
    axis: FilterAxis,
    dims: [usize; 4],
    kernel_size: usize,
    seed: u64,
) -> Result<(Tensor<T>, SpatialFilterBank<T>, ChannelFilterBank<T>)> {
    let [b, c, t, f] = dims;
    let kk = kernel_size * kernel_size;
    let mut r = crate::init::rng(seed);
    let x = Tensor::uniform(vec![b, c, t, f], -1.0, 1.0, &mut r);
    let s = Tensor::uniform(vec![b, axis.locations(t, f), kk], -1.0, 1.0, &mut r);
    let ch = Tensor::uniform(vec![b, c, kk], -1.0, 1.0, &mut r);
    Ok((
        x,
        SpatialFilterBank::new(axis, kernel_size, s)?,
        ChannelFilterBank::new(kernel_size, ch)?,
    ))
}

/// Brute-force oracle: materializes the full `[B, L, C, K²]` product kernel,
/// then convolves with explicit bounds checks.
pub fn ddf_reference<T: Scalar>(
    input: &Tensor<T>,
    spatial: &SpatialFilterBank<T>,
    channel: &ChannelFilterBank<T>,
) -> Result<Tensor<T>> {
    check_dim("ddf_reference", "kernel_size", spatial.kernel_size, channel.kernel_size)?;
    let g = geometry(
        "ddf_reference",
        input,
        spatial.axis,
        &spatial.values,
        &channel.values,
        spatial.kernel_size,
    )?;
    let kk = g.kk();
    let (s, c) = (spatial.values.data(), channel.values.data());
    let mut combined = vec![T::zero(); g.b * g.l * g.c * kk];
    for b in 0..g.b {
        for l in 0..g.l {
            for ch in 0..g.c {
                for tap in 0..kk {
                    combined[((b * g.l + l) * g.c + ch) * kk + tap] =
                        s[(b * g.l + l) * kk + tap] * c[(b * g.c + ch) * kk + tap];
                }
            }
        }
    }
    let x = input.data();
    let pad = g.pad();
    let mut out = vec![T::zero(); input.numel()];
    for b in 0..g.b {
        for ch in 0..g.c {
            for t in 0..g.t {
                for f in 0..g.f {
                    let l = g.axis.location(t, f, g.f);
                    let mut acc = T::zero();
                    for i in 0..g.k {
                        for j in 0..g.k {
                            let ti = t as isize + i as isize - pad;
                            let fj = f as isize + j as isize - pad;
                            if ti < 0 || fj < 0 || ti >= g.t as isize || fj >= g.f as isize {
                                continue;
                            }
                            let xv = x[((b * g.c + ch) * g.t + ti as usize) * g.f + fj as usize];
                            acc += combined[((b * g.l + l) * g.c + ch) * kk + i * g.k + j] * xv;
                        }
                    }
                    out[((b * g.c + ch) * g.t + t) * g.f + f] = acc;
                }
            }
        }
    }
    Tensor::new(input.shape().to_vec(), out)
}

struct DdfOp {
    axis: FilterAxis,
    k: usize,
}

impl<T: Scalar> Backward<T> for DdfOp {
    fn name(&self) -> &'static str {
        "ddf"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let g = backward_raw(inputs[0], self.axis, inputs[1], inputs[2], self.k, grad)?;
        Ok(vec![Some(g.input), Some(g.spatial), Some(g.channel)])
    }
}

impl<T: Scalar> Tape<T> {
    /// Records [`ddf_forward`]; `spatial` holds `[B, L, K²]`, `channel` `[B, C, K²]`.
    pub fn ddf(&mut self, x: Var, spatial: Var, channel: Var, axis: FilterAxis, kernel_size: usize) -> Result<Var> {
        let y = forward_raw(
            self.value(x),
            axis,
            self.value(spatial),
            self.value(channel),
            kernel_size,
        )?;
        self.push(y, vec![x, spatial, channel], DdfOp { axis, k: kernel_size })
    }
}
