//! Finite-difference verification of tape adjoints.
//!
//! A graph `y = f(θ)` is reduced to the scalar `Σ R ⊙ y` with a fixed random
//! projection `R`; its gradient from the tape is compared against central
//! differences `(L(θ + ε) − L(θ − ε)) / 2ε`, coordinate by coordinate.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{ParamStore, Tape, Var};
use crate::block::{Activation, BlockConfig, BlockKind, ConvBlock, ForwardOptions};
use crate::ddf::FilterAxis;
use crate::error::{check_dim, Error, Result};
use crate::filtergen::{ChannelGen, SpatialGen};
use crate::init::rng;
use crate::model::GruWeights;
use crate::model::{ModelConfig, SedModel};
use crate::ops::norm::ChannelStats;
use crate::ops::pool::PoolMode;
use crate::tensor::{DType, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdOptions {
    pub eps: f64,
    pub tolerance: f64,
    /// Coordinates sampled per tensor; `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Fraction of the overall gradient norm below which a tensor's error is
    /// measured against that floor instead of its own norm. Tensors whose
    /// exact gradient vanishes (shift-invariant biases) would otherwise
    /// compare rounding noise with rounding noise.
    pub zero_floor: f64,
}

impl FdOptions {
    /// Step and tolerance suited to the element type.
    pub fn for_dtype(dtype: DType) -> Self {
        let (eps, tolerance) = match dtype {
            DType::F64 => (1e-5, 1e-6),
            DType::F32 => (1e-3, 1e-4),
        };
        Self {
            eps,
            tolerance,
            max_coords: None,
            seed: 0,
            zero_floor: 1e-4,
        }
    }

    /// f32 tape gradients judged against f64 differences, as for the full
    /// model where f32 differences are too noisy to resolve `1e-3`.
    pub fn mixed_f32() -> Self {
        Self {
            tolerance: 1e-3,
            zero_floor: 1e-3,
            ..Self::for_dtype(DType::F64)
        }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }

    pub fn with_max_coords(self, n: usize) -> Self {
        Self {
            max_coords: Some(n),
            ..self
        }
    }
}

/// Outcome for one differentiated tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub coords: usize,
    pub rel_error: f64,
    /// Norms of the sampled analytic and numeric gradients.
    pub analytic_norm: f64,
    pub numeric_norm: f64,
}

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, zero when both vanish.
pub fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn projection(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed ^ 0x9e37_79b9_7f4a_7c15);
    Tensor::uniform(shape.to_vec(), -1.0, 1.0, &mut r)
}

fn project<T: Scalar>(y: &Tensor<T>, r: &Tensor<T>) -> f64 {
    y.data()
        .iter()
        .zip(r.data())
        .map(|(a, b)| a.as_f64() * b.as_f64())
        .sum()
}

fn coords<R: Rng>(n: usize, max: Option<usize>, rng: &mut R) -> Vec<usize> {
    match max {
        Some(m) if m < n => {
            let mut v = sample(rng, n, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..n).collect(),
    }
}

/// Checks the gradient of every tensor in `store` for the graph built by `f`.
/// Inputs to differentiate can be placed in the store and read back with
/// [`ParamStore::leaf`].
pub fn check_params<T, F>(store: &ParamStore<T>, f: F, opts: FdOptions) -> Result<Vec<TensorCheck>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    check_against(store, &f, store, &f, opts)
}

/// Tape gradients of `f` on `store` against central differences of `g` on
/// `reference`, which must hold the same names and values (typically a
/// higher-precision copy).
pub fn check_against<T, U, F, G>(
    store: &ParamStore<T>,
    f: F,
    reference: &ParamStore<U>,
    g: G,
    opts: FdOptions,
) -> Result<Vec<TensorCheck>>
where
    T: Scalar,
    U: Scalar,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
    G: Fn(&mut Tape<U>, &ParamStore<U>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let y = f(&mut tape, store)?;
    let r = projection(tape.value(y).shape(), opts.seed);
    let grads = tape.backward(y, r.cast())?;
    let r_ref: Tensor<U> = r.cast();

    let eval = |s: &ParamStore<U>| -> Result<f64> {
        let mut t = Tape::inference();
        let y = g(&mut t, s)?;
        Ok(project(t.value(y), &r_ref))
    };

    let mut pick = rng(opts.seed.wrapping_add(1));
    let mut work = reference.clone();
    let mut sampled = Vec::new();
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    for name in names {
        let n = store.get(&name)?.value.numel();
        check_dim("gradcheck", "reference size", n, reference.get(&name)?.value.numel())?;
        let idx = coords(n, opts.max_coords, &mut pick);
        let zeros;
        let analytic_t = match grads.param(&name) {
            Some(g) => g,
            None => {
                zeros = Tensor::zeros(store.get(&name)?.value.shape().to_vec());
                &zeros
            }
        };
        let mut analytic = Vec::with_capacity(idx.len());
        let mut numeric = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = reference.get(&name)?.value.data()[i];
            work.get_mut(&name)?.value.data_mut()[i] = orig + U::of(opts.eps);
            let lp = eval(&work)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig - U::of(opts.eps);
            let lm = eval(&work)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig;
            // The realised step can differ from eps after rounding.
            let step = (orig + U::of(opts.eps)).as_f64() - (orig - U::of(opts.eps)).as_f64();
            numeric.push((lp - lm) / step);
            analytic.push(analytic_t.data()[i].as_f64());
        }
        sampled.push((name, analytic, numeric));
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let global = sampled.iter().map(|(_, _, n)| norm(n).powi(2)).sum::<f64>().sqrt();
    Ok(sampled
        .into_iter()
        .map(|(name, analytic, numeric)| {
            let (an, nn) = (norm(&analytic), norm(&numeric));
            let diff: f64 = analytic
                .iter()
                .zip(&numeric)
                .map(|(a, n)| (a - n) * (a - n))
                .sum::<f64>()
                .sqrt();
            let scale = an.max(nn).max(opts.zero_floor * global);
            TensorCheck {
                coords: analytic.len(),
                rel_error: if scale == 0.0 { 0.0 } else { diff / scale },
                analytic_norm: an,
                numeric_norm: nn,
                name,
            }
        })
        .collect())
}

/// Convenience wrapper: differentiates plain input tensors named `x0, x1, …`.
pub fn check_inputs<T, F>(inputs: &[Tensor<T>], f: F, opts: FdOptions) -> Result<Vec<TensorCheck>>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    for (i, x) in inputs.iter().enumerate() {
        store.insert(format!("x{i}"), x.clone());
    }
    check_params(
        &store,
        |tape, s| {
            let vars = (0..inputs.len())
                .map(|i| s.leaf(tape, &format!("x{i}")))
                .collect::<Result<Vec<_>>>()?;
            f(tape, &vars)
        },
        opts,
    )
}

/// Largest relative error, or an error naming the first tensor over tolerance.
pub fn assert_within(op: &str, checks: &[TensorCheck], tolerance: f64) -> Result<f64> {
    let mut worst = 0.0f64;
    for c in checks {
        if !(c.rel_error <= tolerance) {
            return Err(Error::Invalid(format!(
                "{op}: gradient of {} off by {:.3e} (tolerance {tolerance:.0e})",
                c.name, c.rel_error
            )));
        }
        worst = worst.max(c.rel_error);
    }
    Ok(worst)
}

/// Settings for [`run_suite`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SuiteOptions {
    /// Random instances per op.
    pub instances: usize,
    pub seed: u64,
    /// Coordinates sampled per tensor.
    pub max_coords: usize,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            instances: 20,
            seed: 0,
            max_coords: 16,
        }
    }
}

/// Worst relative error of one op over all its instances.
#[derive(Clone, Debug, PartialEq)]
pub struct OpReport {
    pub op: &'static str,
    pub dtype: DType,
    pub instances: usize,
    pub worst: f64,
    pub tolerance: f64,
    /// Instance seed and tensor name of the worst check.
    pub worst_at: String,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst <= self.tolerance
    }
}

impl std::fmt::Display for OpReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<14} {} x{:<3} worst {:.2e} (tol {:.0e}) {} {}",
            self.op,
            self.dtype,
            self.instances,
            self.worst,
            self.tolerance,
            if self.passed() { "ok" } else { "FAIL" },
            self.worst_at
        )
    }
}

type Instance = dyn Fn(&mut ChaCha8Rng, FdOptions) -> Result<Vec<TensorCheck>> + Sync;

struct Case {
    op: &'static str,
    /// Element type of the tape under test.
    dtype: DType,
    fd: FdOptions,
    run: Box<Instance>,
}

fn case(
    op: &'static str,
    run: impl Fn(&mut ChaCha8Rng, FdOptions) -> Result<Vec<TensorCheck>> + Sync + 'static,
) -> Case {
    Case {
        op,
        dtype: DType::F64,
        fd: FdOptions::for_dtype(DType::F64),
        run: Box::new(run),
    }
}

fn uniform(shape: Vec<usize>, r: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, r)
}

/// Moves every parameter off its initial value so zero biases and unit gains
/// are not special points.
fn jitter<T: Scalar>(store: &mut ParamStore<T>, r: &mut ChaCha8Rng) {
    for p in store.iter_mut() {
        for v in p.value.data_mut() {
            *v = T::of(v.as_f64() + r.gen_range(-0.3..0.3));
        }
    }
}

fn random_stats(c: usize, r: &mut ChaCha8Rng) -> ChannelStats<f64> {
    ChannelStats {
        mean: (0..c).map(|_| r.gen_range(-0.5..0.5)).collect(),
        var: (0..c).map(|_| r.gen_range(0.5..2.0)).collect(),
    }
}

fn tiny_model_config(kind: BlockKind) -> ModelConfig {
    ModelConfig {
        frames: 32,
        bands: 16,
        n_classes: 2,
        kinds: vec![BlockKind::Static, kind],
        channels: vec![4, 8],
        pools: vec![(2, 2), (2, 2)],
        gru_hidden: 4,
        gru_layers: 2,
        ..ModelConfig::default()
    }
}

fn tiny_loss<T: Scalar>(
    model: &SedModel<T>,
    params: &ParamStore<T>,
    tape: &mut Tape<T>,
    data: &[Tensor<f64>; 3],
) -> Result<Var> {
    let x = tape.constant(data[0].cast());
    let out = model.forward_with(params, tape, x, model.eval_options())?;
    let ts = tape.constant(data[1].cast());
    let tw = tape.constant(data[2].cast());
    let ls = tape.bce(out.strong, ts)?;
    let lw = tape.bce(out.weak, tw)?;
    let lw = tape.scale(lw, 0.5)?;
    tape.add(ls, lw)
}

/// A two-layer detector on 32 × 16 inputs; the checked scalar is the
/// training loss. Gradients come from a `T` tape; differences are taken on
/// an f64 copy. Normalization runs on fixed statistics, since with batch
/// statistics an overall filter scale is cancelled and the generator gains
/// have (almost) no gradient to compare.
pub fn tiny_model_checks<T: Scalar>(kind: BlockKind, seed: u64, opts: FdOptions) -> Result<Vec<TensorCheck>> {
    let mut r = rng(seed);
    let mut reference = SedModel::<f64>::new(tiny_model_config(kind), seed)?;
    jitter(&mut reference.params, &mut r);
    for (name, buf) in reference.buffers.iter_mut() {
        let (lo, hi) = if name.ends_with("running_var") {
            (0.5, 2.0)
        } else {
            (-0.5, 0.5)
        };
        for v in buf.data_mut() {
            *v = r.gen_range(lo..hi);
        }
    }
    reference.set_temperature(r.gen_range(1.0..5.0));
    // Round through T so both copies hold identical values.
    for p in reference.params.iter_mut() {
        p.value = p.value.cast::<T>().cast();
    }
    let mut model = SedModel::<T>::new(tiny_model_config(kind), seed)?;
    for p in reference.params.iter() {
        model.params.get_mut(&p.name)?.value = p.value.cast();
    }
    model.buffers = reference.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect();

    let cfg = reference.config().clone();
    let x = uniform(vec![2, 1, cfg.frames, cfg.bands], &mut r);
    let mut coin = |shape: Vec<usize>| Tensor::from_fn(shape, |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
    let strong = coin(vec![2, cfg.output_frames(), cfg.n_classes]);
    let weak = coin(vec![2, cfg.n_classes]);
    let data = [x, strong, weak];
    check_against(
        &model.params,
        |tape, params| tiny_loss(&model, params, tape, &data),
        &reference.params,
        |tape, params| tiny_loss(&reference, params, tape, &data),
        opts,
    )
}

fn cases() -> Vec<Case> {
    vec![
        case("conv2d", |r, o| {
            let (b, ci, co) = (r.gen_range(1..3), r.gen_range(1..4), r.gen_range(1..4));
            let (kh, kw) = (2 * r.gen_range(0..2) + 1, 2 * r.gen_range(0..2) + 1);
            let (h, w) = (r.gen_range(kh..kh + 4), r.gen_range(kw..kw + 4));
            let stride = (r.gen_range(1..3), r.gen_range(1..3));
            let pad = (r.gen_range(0..=kh / 2), r.gen_range(0..=kw / 2));
            let inputs = [
                uniform(vec![b, ci, h, w], r),
                uniform(vec![co, ci, kh, kw], r),
                uniform(vec![co], r),
            ];
            check_inputs(&inputs, |t, v| t.conv2d(v[0], v[1], Some(v[2]), stride, pad), o)
        }),
        case("linear", |r, o| {
            let (rows, n, m) = (r.gen_range(1..5), r.gen_range(1..6), r.gen_range(1..6));
            let inputs = [
                uniform(vec![2, rows, n], r),
                uniform(vec![m, n], r),
                uniform(vec![m], r),
            ];
            check_inputs(&inputs, |t, v| t.linear(v[0], v[1], Some(v[2])), o)
        }),
        case("softmax", |r, o| {
            let shape = vec![r.gen_range(1..4), r.gen_range(2..6), r.gen_range(1..4)];
            let axis = r.gen_range(0..3);
            let x: Tensor<f64> = Tensor::uniform(shape, -3.0, 3.0, r);
            check_inputs(&[x], |t, v| t.softmax(v[0], axis), o)
        }),
        case("pool2d", |r, o| {
            let mode = if r.gen_bool(0.5) { PoolMode::Avg } else { PoolMode::Max };
            let window = (r.gen_range(1..4), r.gen_range(1..4));
            let stride = (r.gen_range(1..=window.0), r.gen_range(1..=window.1));
            let shape = vec![
                2,
                r.gen_range(1..3),
                window.0 + r.gen_range(0..5),
                window.1 + r.gen_range(0..5),
            ];
            check_inputs(&[uniform(shape, r)], |t, v| t.pool2d(v[0], mode, window, stride), o)
        }),
        case("elementwise", |r, o| {
            let shape = vec![r.gen_range(1..4), r.gen_range(1..5)];
            let row = vec![1, shape[1]];
            let inputs = [uniform(shape.clone(), r), uniform(shape, r), uniform(row, r)];
            check_inputs(
                &inputs,
                |t, v| {
                    let a = t.relu(v[0])?;
                    let b = t.sigmoid(v[1])?;
                    let c = t.tanh(v[2])?;
                    let ab = t.mul(a, b)?;
                    let abc = t.sub(ab, c)?;
                    let s = t.scale(abc, 1.7)?;
                    t.add(s, v[0])
                },
                o,
            )
        }),
        case("shape_reduce", |r, o| {
            let (a, b, c) = (r.gen_range(1..4), r.gen_range(1..4), r.gen_range(1..4));
            let inputs = [uniform(vec![a, b, c], r), uniform(vec![a, b, c], r)];
            check_inputs(
                &inputs,
                |t, v| {
                    let cat = t.concat(&[v[0], v[1]], 2)?;
                    let p = t.permute(cat, &[2, 0, 1])?;
                    let flat = t.reshape(p, &[2 * c, a * b])?;
                    let m = t.mean_axis(flat, 1)?;
                    let s = t.sum_axis(flat, 0)?;
                    let total = t.sum_all(s)?;
                    let sm = t.sum_all(m)?;
                    t.mul(total, sm)
                },
                o,
            )
        }),
        case("batch_norm", |r, o| {
            let (b, c) = (r.gen_range(2..4), r.gen_range(1..4));
            let shape = vec![b, c, r.gen_range(1..4), r.gen_range(1..4)];
            let running = if r.gen_bool(0.5) {
                Some(random_stats(c, r))
            } else {
                None
            };
            let gamma: Tensor<f64> = Tensor::uniform(vec![c], 0.5, 1.5, r);
            let inputs = [uniform(shape, r), gamma, uniform(vec![c], r)];
            check_inputs(
                &inputs,
                |t, v| Ok(t.batch_norm(v[0], v[1], v[2], running.as_ref())?.0),
                o,
            )
        }),
        case("bce", |r, o| {
            let n = r.gen_range(1..8);
            let pred: Tensor<f64> = Tensor::uniform(vec![n], 0.05, 0.95, r);
            let target: Tensor<f64> = Tensor::from_fn(vec![n], |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 });
            check_inputs(
                &[pred],
                |t, v| {
                    let y = t.constant(target.clone());
                    t.bce(v[0], y)
                },
                o,
            )
        }),
        case("gru", |r, o| {
            let (d, h) = (r.gen_range(1..5), r.gen_range(1..5));
            let reverse = r.gen_bool(0.5);
            let mut store = ParamStore::new();
            GruWeights::init(d, h, r).insert_into(&mut store, "g");
            jitter(&mut store, r);
            store.insert("x", uniform(vec![r.gen_range(1..3), r.gen_range(1..7), d], r));
            check_params(
                &store,
                |t, s| {
                    let x = s.leaf(t, "x")?;
                    t.gru_from_store(s, "g", x, reverse)
                },
                o,
            )
        }),
        case("ddf", |r, o| {
            let axis = FilterAxis::ALL[r.gen_range(0..3)];
            let k = [1, 3, 5][r.gen_range(0..3)];
            let (b, c, t, f) = (
                r.gen_range(1..3),
                r.gen_range(1..4),
                r.gen_range(1..7),
                r.gen_range(1..7),
            );
            let l = axis.locations(t, f);
            let inputs = [
                uniform(vec![b, c, t, f], r),
                uniform(vec![b, l, k * k], r),
                uniform(vec![b, c, k * k], r),
            ];
            check_inputs(&inputs, |tape, v| tape.ddf(v[0], v[1], v[2], axis, k), o)
        }),
        case("filter_norm", |r, o| {
            let rows = uniform(vec![r.gen_range(1..5), [1, 4, 9, 25][r.gen_range(1..4)]], r);
            let gain = Tensor::scalar(r.gen_range(0.5..2.0));
            let tau = r.gen_range(0.5..5.0);
            check_inputs(
                &[rows, gain],
                |t, v| {
                    let a = t.attention_constrain(v[0], tau)?;
                    t.filter_norm(a, v[1])
                },
                o,
            )
        }),
        case("spatial_gen", |r, o| {
            let axis = FilterAxis::ALL[r.gen_range(0..3)];
            let g = SpatialGen {
                axis,
                kernel_size: [3, 5][r.gen_range(0..2)],
                window: [1, 3, 5][r.gen_range(0..3)],
                channels: r.gen_range(1..4),
                frames: r.gen_range(2..6),
                bands: r.gen_range(2..6),
            };
            let tau = if r.gen_bool(0.5) {
                Some(r.gen_range(0.5..5.0))
            } else {
                None
            };
            let mut store = ParamStore::new();
            g.init(&mut store, "g", r);
            jitter(&mut store, r);
            store.insert("x", uniform(vec![r.gen_range(1..3), g.channels, g.frames, g.bands], r));
            check_params(
                &store,
                |t, s| {
                    let x = s.leaf(t, "x")?;
                    let spatial = g.record(t, s, "g", x, tau)?;
                    let channel = t.constant(Tensor::ones(vec![
                        t.value(x).dim(0),
                        g.channels,
                        g.kernel_size * g.kernel_size,
                    ]));
                    t.ddf(x, spatial, channel, axis, g.kernel_size)
                },
                o,
            )
        }),
        case("channel_gen", |r, o| {
            let g = ChannelGen {
                kernel_size: [3, 5][r.gen_range(0..2)],
                channels: r.gen_range(4..9),
                reduction: r.gen_range(1..5),
            };
            let mut store = ParamStore::new();
            g.init(&mut store, "g", r);
            jitter(&mut store, r);
            let (b, t, f) = (r.gen_range(1..3), r.gen_range(1..5), r.gen_range(1..5));
            store.insert("x", uniform(vec![b, g.channels, t, f], r));
            let kk = g.kernel_size * g.kernel_size;
            let spatial: Tensor<f64> = uniform(vec![b, f, kk], r);
            check_params(
                &store,
                |tape, s| {
                    let x = s.leaf(tape, "x")?;
                    let channel = g.record(tape, s, "g", x)?;
                    let sp = tape.constant(spatial.clone());
                    tape.ddf(x, sp, channel, FilterAxis::Frequency, g.kernel_size)
                },
                o,
            )
        }),
        case("conv_block", |r, o| {
            let kind = BlockKind::ALL[r.gen_range(0..BlockKind::ALL.len())];
            let mut cfg = BlockConfig::new(
                kind,
                r.gen_range(1..4),
                r.gen_range(2..9),
                r.gen_range(2..6),
                r.gen_range(2..6),
            );
            cfg.use_attention = r.gen_bool(0.5);
            cfg.activation = if r.gen_bool(0.5) {
                Activation::Glu
            } else {
                Activation::Relu
            };
            let block = ConvBlock::new(cfg, "b")?;
            let mut store = ParamStore::new();
            block.init(&mut store, r);
            jitter(&mut store, r);
            store.insert("x", uniform(vec![2, cfg.in_channels, cfg.frames, cfg.bands], r));
            let running = random_stats(cfg.out_channels, r);
            let opts = ForwardOptions::eval(r.gen_range(1.0..5.0));
            check_params(
                &store,
                |t, s| {
                    let x = s.leaf(t, "x")?;
                    Ok(block.forward(t, s, Some(&running), x, opts)?.y)
                },
                o,
            )
        }),
        case("tiny_model", |r, o| {
            let kind = [BlockKind::Ffd, BlockKind::Ftd, BlockKind::Ddf, BlockKind::Static][r.gen_range(0..4)];
            tiny_model_checks::<f64>(kind, r.gen(), o)
        }),
        Case {
            op: "tiny_model",
            dtype: DType::F32,
            fd: FdOptions::mixed_f32(),
            run: Box::new(|r, o| {
                let kind = [BlockKind::Ffd, BlockKind::Ftd, BlockKind::Ddf, BlockKind::Static][r.gen_range(0..4)];
                tiny_model_checks::<f32>(kind, r.gen(), o)
            }),
        },
    ]
}

/// Op names covered by [`run_suite`], in order.
pub fn suite_ops() -> Vec<&'static str> {
    let mut ops: Vec<_> = cases().iter().map(|c| c.op).collect();
    ops.dedup();
    ops
}

/// Runs every op over `opts.instances` random instances. `only` restricts
/// the run to the named ops.
pub fn run_suite(opts: &SuiteOptions, only: Option<&[&str]>) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    for (ci, c) in cases().into_iter().enumerate() {
        if only.is_some_and(|o| !o.contains(&c.op)) {
            continue;
        }
        let mut report = OpReport {
            op: c.op,
            dtype: c.dtype,
            instances: opts.instances,
            worst: 0.0,
            tolerance: c.fd.tolerance,
            worst_at: String::new(),
        };
        for i in 0..opts.instances {
            let seed = opts.seed.wrapping_mul(1_000_003).wrapping_add((ci * 1000 + i) as u64);
            let mut r = rng(seed);
            let fd = c.fd.with_seed(seed).with_max_coords(opts.max_coords);
            for check in (c.run)(&mut r, fd)? {
                if !(check.rel_error <= report.worst) {
                    report.worst = check.rel_error;
                    report.worst_at = format!("instance {i}, {}", check.name);
                }
            }
        }
        log::info!("{report}");
        reports.push(report);
    }
    Ok(reports)
}
