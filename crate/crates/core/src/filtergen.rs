//! Filter-generating branches.
//!
//! The spatial branch compresses one axis of the feature map with a
//! full-extent convolution and slides a window of `W` along the other,
//! producing `K²` values per location; the rows are then tempered by a
//! softmax ([`attention_constrain`]) and standardized ([`filter_norm`]).
//! The channel branch is a squeeze-style bottleneck producing one `K²` row per
//! channel, shared by every location.

use rand::Rng;

use crate::autograd::{Backward, ParamStore, Tape, Var};
use crate::ddf::{ChannelFilterBank, FilterAxis, SpatialFilterBank};
use crate::error::{check_dim, Error, Result};
use crate::init::kaiming_uniform;
use crate::tensor::{Scalar, Tensor};

pub const FILTER_NORM_EPS: f64 = 1e-5;

/// Shape configuration of a spatial filter generator. Parameter values live
/// in a [`ParamStore`] under `<prefix>.spatial.*`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SpatialGen {
    pub axis: FilterAxis,
    pub kernel_size: usize,
    /// Window along the sliding axis; odd. Unused for the pixel axis.
    pub window: usize,
    pub channels: usize,
    /// Frame count the frequency-axis kernel spans.
    pub frames: usize,
    /// Band count the time-axis kernel spans.
    pub bands: usize,
}

impl SpatialGen {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size % 2 == 0 {
            return Err(Error::Invalid(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.axis != FilterAxis::Pixel && self.window % 2 == 0 {
            return Err(Error::Invalid(format!("window must be odd, got {}", self.window)));
        }
        let (slide, name) = match self.axis {
            FilterAxis::Frequency => (self.bands, "bands"),
            FilterAxis::Time => (self.frames, "frames"),
            FilterAxis::Pixel => return Ok(()),
        };
        // Same-padding by (W−1)/2 always leaves room, but guard W > extent + padding.
        if self.window > slide + (self.window - 1) {
            return Err(Error::Invalid(format!("window {} exceeds {name} {slide}", self.window)));
        }
        Ok(())
    }

    /// `[K², C, kT, kF]` of the generating convolution.
    pub fn weight_shape(&self) -> [usize; 4] {
        let kk = self.kernel_size * self.kernel_size;
        match self.axis {
            FilterAxis::Frequency => [kk, self.channels, self.frames, self.window],
            FilterAxis::Time => [kk, self.channels, self.window, self.bands],
            FilterAxis::Pixel => [kk, self.channels, 1, 1],
        }
    }

    fn padding(&self) -> (usize, usize) {
        match self.axis {
            FilterAxis::Frequency => (0, (self.window - 1) / 2),
            FilterAxis::Time => ((self.window - 1) / 2, 0),
            FilterAxis::Pixel => (0, 0),
        }
    }

    /// Weight + bias + filter-norm gain.
    pub fn param_count(&self) -> usize {
        let kk = self.kernel_size * self.kernel_size;
        self.weight_shape().iter().product::<usize>() + kk + 1
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) {
        let shape = self.weight_shape();
        let fan_in = shape[1] * shape[2] * shape[3];
        store.insert(
            format!("{prefix}.spatial.weight"),
            kaiming_uniform(shape.to_vec(), fan_in, rng),
        );
        store.insert(format!("{prefix}.spatial.bias"), Tensor::zeros(vec![shape[0]]));
        store.insert(format!("{prefix}.spatial.gain"), Tensor::ones(vec![1]));
    }

    /// Records the branch on `tape`; returns `[B, L, K²]`. `temperature =
    /// None` bypasses the attention constraint.
    pub fn record<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        prefix: &str,
        x: Var,
        temperature: Option<f64>,
    ) -> Result<Var> {
        let [b, c, t, f] = tape.value(x).dims::<4>("gen_spatial_filters")?;
        check_dim("gen_spatial_filters", "channel", self.channels, c)?;
        match self.axis {
            FilterAxis::Frequency => check_dim("gen_spatial_filters", "frames", self.frames, t)?,
            FilterAxis::Time => check_dim("gen_spatial_filters", "bands", self.bands, f)?,
            FilterAxis::Pixel => {}
        }
        let kk = self.kernel_size * self.kernel_size;
        let w = store.leaf(tape, &format!("{prefix}.spatial.weight"))?;
        let bias = store.leaf(tape, &format!("{prefix}.spatial.bias"))?;
        let gain = store.leaf(tape, &format!("{prefix}.spatial.gain"))?;
        let raw = tape.conv2d(x, w, Some(bias), (1, 1), self.padding())?;
        let l = self.axis.locations(t, f);
        let flat = tape.reshape(raw, &[b, kk, l])?;
        let rows = tape.permute(flat, &[0, 2, 1])?;
        let constrained = match temperature {
            Some(tau) => attention_constrain_var(tape, rows, tau)?,
            None => rows,
        };
        filter_norm_var(tape, constrained, gain)
    }
}

/// Shape configuration of a channel filter generator (`<prefix>.channel.*`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChannelGen {
    pub kernel_size: usize,
    pub channels: usize,
    pub reduction: usize,
}

impl ChannelGen {
    pub fn hidden(&self) -> usize {
        (self.channels / self.reduction.max(1)).max(1)
    }

    pub fn param_count(&self) -> usize {
        let (c, h, kk) = (self.channels, self.hidden(), self.kernel_size * self.kernel_size);
        h * c + h + c * kk * h + c * kk + 1
    }

    pub fn init<T: Scalar, R: Rng + ?Sized>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut R) {
        let (c, h, kk) = (self.channels, self.hidden(), self.kernel_size * self.kernel_size);
        store.insert(
            format!("{prefix}.channel.fc1.weight"),
            kaiming_uniform(vec![h, c], c, rng),
        );
        store.insert(format!("{prefix}.channel.fc1.bias"), Tensor::zeros(vec![h]));
        store.insert(
            format!("{prefix}.channel.fc2.weight"),
            kaiming_uniform(vec![c * kk, h], h, rng),
        );
        store.insert(format!("{prefix}.channel.fc2.bias"), Tensor::zeros(vec![c * kk]));
        store.insert(format!("{prefix}.channel.gain"), Tensor::ones(vec![1]));
    }

    /// Records the branch; returns `[B, C, K²]`.
    pub fn record<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, prefix: &str, x: Var) -> Result<Var> {
        let [b, c, _, _] = tape.value(x).dims::<4>("gen_channel_filters")?;
        check_dim("gen_channel_filters", "channel", self.channels, c)?;
        let kk = self.kernel_size * self.kernel_size;
        let over_f = tape.mean_axis(x, 3)?;
        let pooled = tape.mean_axis(over_f, 2)?;
        let w1 = store.leaf(tape, &format!("{prefix}.channel.fc1.weight"))?;
        let b1 = store.leaf(tape, &format!("{prefix}.channel.fc1.bias"))?;
        let w2 = store.leaf(tape, &format!("{prefix}.channel.fc2.weight"))?;
        let b2 = store.leaf(tape, &format!("{prefix}.channel.fc2.bias"))?;
        let gain = store.leaf(tape, &format!("{prefix}.channel.gain"))?;
        let h = tape.linear(pooled, w1, Some(b1))?;
        let h = tape.relu(h)?;
        let out = tape.linear(h, w2, Some(b2))?;
        let rows = tape.reshape(out, &[b, c, kk])?;
        filter_norm_var(tape, rows, gain)
    }
}

/// Row-wise `softmax(filters / temperature)` over the last axis.
pub fn attention_constrain<T: Scalar>(filters: &Tensor<T>, temperature: f64) -> Result<Tensor<T>> {
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let scaled = crate::ops::scale(filters, T::of(1.0 / temperature));
    crate::ops::softmax(&scaled, filters.ndim().saturating_sub(1))
}

fn attention_constrain_var<T: Scalar>(tape: &mut Tape<T>, x: Var, temperature: f64) -> Result<Var> {
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let last = tape.value(x).ndim() - 1;
    let s = tape.scale(x, 1.0 / temperature)?;
    tape.softmax(s, last)
}

/// Standardizes each row over the last axis: `gain · (x − mean) / (std + ε)`,
/// with the population standard deviation.
pub fn filter_norm<T: Scalar>(filters: &Tensor<T>, gain: T) -> Result<Tensor<T>> {
    Ok(filter_norm_forward(filters, gain)?.0)
}

/// Output plus the per-row `(mean, std)` needed by the adjoint.
fn filter_norm_forward<T: Scalar>(x: &Tensor<T>, gain: T) -> Result<(Tensor<T>, Vec<(T, T)>)> {
    let n = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("filter_norm", "rank 0 input"))?;
    if n < 2 {
        return Err(Error::shape("filter_norm", "rows need at least two elements"));
    }
    let eps = T::of(FILTER_NORM_EPS);
    let inv_n = T::one() / T::of(n as f64);
    let mut out = Vec::with_capacity(x.numel());
    let mut stats = Vec::with_capacity(x.numel() / n);
    for row in x.data().chunks_exact(n) {
        let mean = row.iter().copied().sum::<T>() * inv_n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let std = var.sqrt();
        let scale = gain / (std + eps);
        out.extend(row.iter().map(|&v| (v - mean) * scale));
        stats.push((mean, std));
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, stats))
}

struct FilterNormOp<T> {
    stats: Vec<(T, T)>,
}

impl<T: Scalar> Backward<T> for FilterNormOp<T> {
    fn name(&self) -> &'static str {
        "filter_norm"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, gain) = (inputs[0], inputs[1].data()[0]);
        let n = *x.shape().last().expect("checked in forward");
        let nt = T::of(n as f64);
        let eps = T::of(FILTER_NORM_EPS);
        let mut dx = Vec::with_capacity(x.numel());
        let mut dgain = T::zero();
        for ((row, grow), &(mean, std)) in x
            .data()
            .chunks_exact(n)
            .zip(grad.data().chunks_exact(n))
            .zip(&self.stats)
        {
            let d = std + eps;
            let mut gu_sum = T::zero();
            let mut gu_xc = T::zero();
            for (&v, &g) in row.iter().zip(grow) {
                let xc = v - mean;
                dgain += g * xc / d;
                gu_sum += g * gain;
                gu_xc += g * gain * xc;
            }
            let gu_mean = gu_sum / nt;
            // The std term vanishes for constant rows (xc = 0).
            let k = if std > T::zero() {
                gu_xc / (nt * std * d * d)
            } else {
                T::zero()
            };
            dx.extend(
                row.iter()
                    .zip(grow)
                    .map(|(&v, &g)| (g * gain - gu_mean) / d - (v - mean) * k),
            );
        }
        Ok(vec![
            Some(Tensor::new(x.shape().to_vec(), dx)?),
            Some(Tensor::scalar(dgain)),
        ])
    }
}

pub(crate) fn filter_norm_var<T: Scalar>(tape: &mut Tape<T>, x: Var, gain: Var) -> Result<Var> {
    check_dim("filter_norm", "gain", 1, tape.value(gain).numel())?;
    let (y, stats) = filter_norm_forward(tape.value(x), tape.value(gain).data()[0])?;
    tape.push(y, vec![x, gain], FilterNormOp { stats })
}

impl<T: Scalar> Tape<T> {
    pub fn filter_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        filter_norm_var(self, x, gain)
    }

    pub fn attention_constrain(&mut self, x: Var, temperature: f64) -> Result<Var> {
        attention_constrain_var(self, x, temperature)
    }
}

/// Generates spatial filters for `x` without recording gradients.
pub fn gen_spatial_filters<T: Scalar>(
    x: &Tensor<T>,
    gen: &SpatialGen,
    store: &ParamStore<T>,
    prefix: &str,
    temperature: Option<f64>,
) -> Result<SpatialFilterBank<T>> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let v = gen.record(&mut tape, store, prefix, xv, temperature)?;
    SpatialFilterBank::new(gen.axis, gen.kernel_size, tape.value(v).clone())
}

/// Generates channel filters for `x` without recording gradients.
pub fn gen_channel_filters<T: Scalar>(
    x: &Tensor<T>,
    gen: &ChannelGen,
    store: &ParamStore<T>,
    prefix: &str,
) -> Result<ChannelFilterBank<T>> {
    let mut tape = Tape::inference();
    let xv = tape.constant(x.clone());
    let v = gen.record(&mut tape, store, prefix, xv)?;
    ChannelFilterBank::new(gen.kernel_size, tape.value(v).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::rng;

    #[test]
    fn huge_temperature_gives_uniform_rows() {
        let x = Tensor::<f64>::from_fn(vec![3, 9], |i| (i as f64 * 0.7).cos() * 5.0);
        let y = attention_constrain(&x, 1e6).unwrap();
        assert!(y.data().iter().all(|v| (v - 1.0 / 9.0).abs() < 1e-4));
    }

    #[test]
    fn one_hot_row_closed_form() {
        let mut x = Tensor::<f64>::zeros(vec![1, 9]);
        x.set(&[0, 0], 1.0);
        let y = attention_constrain(&x, 1.0).unwrap();
        let e = std::f64::consts::E;
        let z = e + 8.0;
        assert!((y.data()[0] - e / z).abs() < 1e-15);
        for &v in &y.data()[1..] {
            assert!((v - 1.0 / z).abs() < 1e-15);
        }
    }

    #[test]
    fn rows_stay_within_simplex_diameter() {
        let mut r = rng(3);
        let x = Tensor::<f64>::uniform(vec![16, 9], -50.0, 50.0, &mut r);
        let y = attention_constrain(&x, 0.5).unwrap();
        for a in y.data().chunks(9) {
            for b in y.data().chunks(9) {
                let l1: f64 = a.iter().zip(b).map(|(p, q)| (p - q).abs()).sum();
                assert!(l1 <= 2.0 + 1e-12);
            }
        }
        assert!(attention_constrain(&x, 0.0).is_err());
    }

    #[test]
    fn filter_norm_examples() {
        let c = Tensor::<f64>::full(vec![2, 4], 3.0);
        assert!(filter_norm(&c, 2.5).unwrap().data().iter().all(|&v| v == 0.0));
        let r = Tensor::<f64>::from_f64(vec![1, 2], &[1.0, -1.0]).unwrap();
        let y = filter_norm(&r, 1.0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-4 && (y.data()[1] + 1.0).abs() < 1e-4);
    }

    #[test]
    fn filter_norm_standardizes_to_gain() {
        let mut r = rng(11);
        let x = Tensor::<f64>::uniform(vec![20, 9], -3.0, 3.0, &mut r);
        let y = filter_norm(&x, 1.7).unwrap();
        for row in y.data().chunks(9) {
            let m = row.iter().sum::<f64>() / 9.0;
            let s = (row.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 9.0).sqrt();
            assert!(m.abs() < 1e-6);
            assert!((s - 1.7).abs() < 1e-4);
        }
    }

    fn spatial(axis: FilterAxis) -> SpatialGen {
        SpatialGen {
            axis,
            kernel_size: 3,
            window: 3,
            channels: 2,
            frames: 5,
            bands: 6,
        }
    }

    #[test]
    fn spatial_rows_per_axis() {
        let mut r = rng(5);
        let x = Tensor::<f64>::uniform(vec![2, 2, 5, 6], -1.0, 1.0, &mut r);
        for (axis, l) in [
            (FilterAxis::Frequency, 6),
            (FilterAxis::Time, 5),
            (FilterAxis::Pixel, 30),
        ] {
            let g = spatial(axis);
            let mut store = ParamStore::new();
            g.init(&mut store, "g", &mut r);
            let bank = gen_spatial_filters(&x, &g, &store, "g", Some(2.0)).unwrap();
            assert_eq!(bank.values.shape(), &[2, l, 9]);
            for row in bank.values.data().chunks(9) {
                assert!(row.iter().sum::<f64>().abs() < 1e-9);
            }
            assert_eq!(store.numel(), g.param_count(), "parameter count for {axis:?}");
        }
    }

    #[test]
    fn frame_extent_is_bound() {
        let g = spatial(FilterAxis::Frequency);
        let mut store = ParamStore::new();
        g.init(&mut store, "g", &mut rng(0));
        let x = Tensor::<f64>::zeros(vec![1, 2, 7, 6]);
        assert!(matches!(
            gen_spatial_filters(&x, &g, &store, "g", None),
            Err(Error::Dim { axis: "frames", .. })
        ));
    }

    #[test]
    fn frequency_rows_are_local() {
        let g = spatial(FilterAxis::Frequency);
        let mut r = rng(8);
        let mut store = ParamStore::new();
        g.init(&mut store, "g", &mut r);
        let x = Tensor::<f64>::uniform(vec![1, 2, 5, 6], -1.0, 1.0, &mut r);
        let base = gen_spatial_filters(&x, &g, &store, "g", Some(1.0)).unwrap();
        let mut y = x.clone();
        for c in 0..2 {
            for t in 0..5 {
                let v = y.at(&[0, c, t, 1]);
                y.set(&[0, c, t, 1], v + 0.7);
            }
        }
        let moved = gen_spatial_filters(&y, &g, &store, "g", Some(1.0)).unwrap();
        for f in 0..6 {
            let changed = (0..9).any(|k| base.values.at(&[0, f, k]) != moved.values.at(&[0, f, k]));
            assert_eq!(changed, f <= 2, "band {f}");
        }
    }

    #[test]
    fn channel_rows_and_batch_independence() {
        let g = ChannelGen {
            kernel_size: 3,
            channels: 8,
            reduction: 4,
        };
        let mut r = rng(2);
        let mut store = ParamStore::new();
        g.init(&mut store, "g", &mut r);
        assert_eq!(store.numel(), g.param_count());
        let x = Tensor::<f64>::uniform(vec![2, 8, 4, 4], -1.0, 1.0, &mut r);
        let both = gen_channel_filters(&x, &g, &store, "g").unwrap();
        assert_eq!(both.values.shape(), &[2, 8, 9]);
        let first = Tensor::new(vec![1, 8, 4, 4], x.data()[..128].to_vec()).unwrap();
        let alone = gen_channel_filters(&first, &g, &store, "g").unwrap();
        assert_eq!(&both.values.data()[..72], alone.values.data());
    }

    #[test]
    fn adjoints_match_finite_differences() {
        use crate::gradcheck::{check_inputs, check_params, FdOptions};
        use crate::tensor::DType;
        let opts = FdOptions::for_dtype(DType::F64);
        let mut r = rng(21);
        let rows = Tensor::<f64>::uniform(vec![4, 9], -2.0, 2.0, &mut r);
        let gain = Tensor::<f64>::scalar(1.3);
        let checks = check_inputs(&[rows, gain], |t, v| t.filter_norm(v[0], v[1]), opts).unwrap();
        assert!(checks.iter().all(|c| c.rel_error < 1e-6), "{checks:?}");

        for axis in FilterAxis::ALL {
            let g = spatial(axis);
            let mut store = ParamStore::<f64>::new();
            g.init(&mut store, "g", &mut r);
            store.insert("x", Tensor::uniform(vec![2, 2, 5, 6], -1.0, 1.0, &mut r));
            let checks = check_params(
                &store,
                |t, s| {
                    let x = s.leaf(t, "x")?;
                    g.record(t, s, "g", x, Some(0.7))
                },
                opts.with_max_coords(40),
            )
            .unwrap();
            assert!(checks.iter().all(|c| c.rel_error < 1e-6), "{axis:?}: {checks:?}");
        }
    }
}
