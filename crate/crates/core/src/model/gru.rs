//! Gated recurrent unit layers.
//!
//! Gate order in the stacked weights is reset, update, candidate:
//!
//! ```text
//! r  = σ(W_ir x + b_ir + W_hr h + b_hr)
//! z  = σ(W_iz x + b_iz + W_hz h + b_hz)
//! n  = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))
//! h' = (1 − z) ⊙ h + z ⊙ n
//! ```

use rand::Rng;
use rayon::prelude::*;

use crate::autograd::{Backward, ParamStore, Tape, Var};
use crate::error::{check_dim, Error, Result};
use crate::ops::sigmoid_scalar;
use crate::tensor::{Scalar, Tensor};

/// Weights of one direction: `w_ih [3H, D]`, `w_hh [3H, H]`, `b_ih [3H]`, `b_hh [3H]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruWeights<T> {
    pub w_ih: Tensor<T>,
    pub w_hh: Tensor<T>,
    pub b_ih: Tensor<T>,
    pub b_hh: Tensor<T>,
}

impl<T: Scalar> GruWeights<T> {
    pub fn hidden(&self) -> usize {
        self.w_hh.shape().get(1).copied().unwrap_or(0)
    }

    /// `U(−1/√H, 1/√H)` for every tensor.
    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let k = 1.0 / (hidden as f64).sqrt();
        Self {
            w_ih: Tensor::uniform(vec![3 * hidden, input], -k, k, rng),
            w_hh: Tensor::uniform(vec![3 * hidden, hidden], -k, k, rng),
            b_ih: Tensor::uniform(vec![3 * hidden], -k, k, rng),
            b_hh: Tensor::uniform(vec![3 * hidden], -k, k, rng),
        }
    }

    pub fn numel(&self) -> usize {
        self.w_ih.numel() + self.w_hh.numel() + self.b_ih.numel() + self.b_hh.numel()
    }

    pub fn insert_into(self, store: &mut ParamStore<T>, prefix: &str) {
        store.insert(format!("{prefix}.w_ih"), self.w_ih);
        store.insert(format!("{prefix}.w_hh"), self.w_hh);
        store.insert(format!("{prefix}.b_ih"), self.b_ih);
        store.insert(format!("{prefix}.b_hh"), self.b_hh);
    }
}

fn check_shapes<T: Scalar>(
    x: &Tensor<T>,
    w_ih: &Tensor<T>,
    w_hh: &Tensor<T>,
    b_ih: &Tensor<T>,
    b_hh: &Tensor<T>,
) -> Result<(usize, usize, usize, usize)> {
    let [b, t, d] = x.dims::<3>("gru")?;
    let [h3, h] = w_hh.dims::<2>("gru")?;
    if h3 != 3 * h || h == 0 {
        return Err(Error::shape(
            "gru",
            format!("w_hh shape {:?} is not [3H, H]", w_hh.shape()),
        ));
    }
    let [h3i, di] = w_ih.dims::<2>("gru")?;
    check_dim("gru", "gates", 3 * h, h3i)?;
    check_dim("gru", "input", di, d)?;
    check_dim("gru", "b_ih", 3 * h, b_ih.numel())?;
    check_dim("gru", "b_hh", 3 * h, b_hh.numel())?;
    Ok((b, t, d, h))
}

/// `out[j] = Σ_k w[j,k] v[k] + bias[j]`.
fn gemv<T: Scalar>(w: &[T], v: &[T], bias: &[T], out: &mut [T]) {
    let n = v.len();
    for ((o, row), &b) in out.iter_mut().zip(w.chunks_exact(n)).zip(bias) {
        let mut acc = b;
        for (&a, &x) in row.iter().zip(v) {
            acc += a * x;
        }
        *o = acc;
    }
}

/// Per-step gate values for one batch item, in processing order.
struct Trace<T> {
    r: Vec<T>,
    z: Vec<T>,
    n: Vec<T>,
    hn: Vec<T>,
    h_prev: Vec<T>,
}

fn run_sequence<T: Scalar>(
    x: &[T],
    steps: usize,
    d: usize,
    h: usize,
    w: [&[T]; 4],
    reverse: bool,
    out: &mut [T],
) -> Trace<T> {
    let [w_ih, w_hh, b_ih, b_hh] = w;
    let mut tr = Trace {
        r: vec![T::zero(); steps * h],
        z: vec![T::zero(); steps * h],
        n: vec![T::zero(); steps * h],
        hn: vec![T::zero(); steps * h],
        h_prev: vec![T::zero(); steps * h],
    };
    let mut state = vec![T::zero(); h];
    let mut gi = vec![T::zero(); 3 * h];
    let mut gh = vec![T::zero(); 3 * h];
    for s in 0..steps {
        let t = if reverse { steps - 1 - s } else { s };
        gemv(w_ih, &x[t * d..(t + 1) * d], b_ih, &mut gi);
        gemv(w_hh, &state, b_hh, &mut gh);
        let o = s * h;
        tr.h_prev[o..o + h].copy_from_slice(&state);
        for j in 0..h {
            let r = sigmoid_scalar(gi[j] + gh[j]);
            let z = sigmoid_scalar(gi[h + j] + gh[h + j]);
            let n = (gi[2 * h + j] + r * gh[2 * h + j]).tanh();
            state[j] = (T::one() - z) * state[j] + z * n;
            tr.r[o + j] = r;
            tr.z[o + j] = z;
            tr.n[o + j] = n;
            tr.hn[o + j] = gh[2 * h + j];
        }
        out[t * h..(t + 1) * h].copy_from_slice(&state);
    }
    tr
}

fn forward_raw<T: Scalar>(
    x: &Tensor<T>,
    w_ih: &Tensor<T>,
    w_hh: &Tensor<T>,
    b_ih: &Tensor<T>,
    b_hh: &Tensor<T>,
    reverse: bool,
) -> Result<(Tensor<T>, Vec<Trace<T>>)> {
    let (b, t, d, h) = check_shapes(x, w_ih, w_hh, b_ih, b_hh)?;
    let mut out = vec![T::zero(); b * t * h];
    let w = [w_ih.data(), w_hh.data(), b_ih.data(), b_hh.data()];
    let traces = if t * h == 0 {
        Vec::new()
    } else {
        out.par_chunks_mut(t * h)
            .zip(x.data().par_chunks(t * d.max(1)))
            .map(|(o, xs)| run_sequence(xs, t, d, h, w, reverse, o))
            .collect()
    };
    Ok((Tensor::new(vec![b, t, h], out)?, traces))
}

struct GruOp<T> {
    reverse: bool,
    traces: Vec<Trace<T>>,
}

struct ItemGrads<T> {
    dx: Vec<T>,
    dw_ih: Vec<T>,
    dw_hh: Vec<T>,
    db_ih: Vec<T>,
    db_hh: Vec<T>,
}

impl<T: Scalar> GruOp<T> {
    #[allow(clippy::too_many_arguments)]
    fn item(
        &self,
        tr: &Trace<T>,
        x: &[T],
        gy: &[T],
        steps: usize,
        d: usize,
        h: usize,
        w_ih: &[T],
        w_hh: &[T],
    ) -> ItemGrads<T> {
        let mut g = ItemGrads {
            dx: vec![T::zero(); steps * d],
            dw_ih: vec![T::zero(); 3 * h * d],
            dw_hh: vec![T::zero(); 3 * h * h],
            db_ih: vec![T::zero(); 3 * h],
            db_hh: vec![T::zero(); 3 * h],
        };
        let mut dh = vec![T::zero(); h];
        let mut dgi = vec![T::zero(); 3 * h];
        let mut dgh = vec![T::zero(); 3 * h];
        for s in (0..steps).rev() {
            let t = if self.reverse { steps - 1 - s } else { s };
            let o = s * h;
            for j in 0..h {
                dh[j] += gy[t * h + j];
            }
            let hp = &tr.h_prev[o..o + h];
            for j in 0..h {
                let (r, z, n, hn) = (tr.r[o + j], tr.z[o + j], tr.n[o + j], tr.hn[o + j]);
                let dz = dh[j] * (n - hp[j]);
                let dn = dh[j] * z;
                let da_n = dn * (T::one() - n * n);
                let da_r = da_n * hn * r * (T::one() - r);
                let da_z = dz * z * (T::one() - z);
                dgi[j] = da_r;
                dgi[h + j] = da_z;
                dgi[2 * h + j] = da_n;
                dgh[j] = da_r;
                dgh[h + j] = da_z;
                dgh[2 * h + j] = da_n * r;
                dh[j] = dh[j] * (T::one() - z);
            }
            let xt = &x[t * d..(t + 1) * d];
            for (row, &gv) in dgi.iter().enumerate() {
                g.db_ih[row] += gv;
                let wrow = &w_ih[row * d..(row + 1) * d];
                let dwrow = &mut g.dw_ih[row * d..(row + 1) * d];
                for k in 0..d {
                    dwrow[k] += gv * xt[k];
                    g.dx[t * d + k] += gv * wrow[k];
                }
            }
            for (row, &gv) in dgh.iter().enumerate() {
                g.db_hh[row] += gv;
                let wrow = &w_hh[row * h..(row + 1) * h];
                let dwrow = &mut g.dw_hh[row * h..(row + 1) * h];
                for k in 0..h {
                    dwrow[k] += gv * hp[k];
                    dh[k] += gv * wrow[k];
                }
            }
        }
        g
    }
}

impl<T: Scalar> Backward<T> for GruOp<T> {
    fn name(&self) -> &'static str {
        "gru"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let (x, w_ih, w_hh) = (inputs[0], inputs[1], inputs[2]);
        let (b, t, d, h) = check_shapes(x, w_ih, w_hh, inputs[3], inputs[4])?;
        let items: Vec<ItemGrads<T>> = (0..b)
            .into_par_iter()
            .map(|i| {
                self.item(
                    &self.traces[i],
                    &x.data()[i * t * d..(i + 1) * t * d],
                    &grad.data()[i * t * h..(i + 1) * t * h],
                    t,
                    d,
                    h,
                    w_ih.data(),
                    w_hh.data(),
                )
            })
            .collect();
        // Reduce over the batch in index order so results do not depend on
        // the thread count.
        let mut dx = Vec::with_capacity(b * t * d);
        let mut dw_ih = vec![T::zero(); 3 * h * d];
        let mut dw_hh = vec![T::zero(); 3 * h * h];
        let mut db_ih = vec![T::zero(); 3 * h];
        let mut db_hh = vec![T::zero(); 3 * h];
        for g in items {
            dx.extend(g.dx);
            for (a, v) in dw_ih.iter_mut().zip(g.dw_ih) {
                *a += v;
            }
            for (a, v) in dw_hh.iter_mut().zip(g.dw_hh) {
                *a += v;
            }
            for (a, v) in db_ih.iter_mut().zip(g.db_ih) {
                *a += v;
            }
            for (a, v) in db_hh.iter_mut().zip(g.db_hh) {
                *a += v;
            }
        }
        Ok(vec![
            Some(Tensor::new(x.shape().to_vec(), dx)?),
            Some(Tensor::new(vec![3 * h, d], dw_ih)?),
            Some(Tensor::new(vec![3 * h, h], dw_hh)?),
            Some(Tensor::new(vec![3 * h], db_ih)?),
            Some(Tensor::new(vec![3 * h], db_hh)?),
        ])
    }
}

impl<T: Scalar> Tape<T> {
    /// One GRU direction over `x [B, T, D]`, zero initial state; returns
    /// `[B, T, H]` aligned with the input frames.
    pub fn gru(&mut self, x: Var, w_ih: Var, w_hh: Var, b_ih: Var, b_hh: Var, reverse: bool) -> Result<Var> {
        let (y, traces) = forward_raw(
            self.value(x),
            self.value(w_ih),
            self.value(w_hh),
            self.value(b_ih),
            self.value(b_hh),
            reverse,
        )?;
        self.push(y, vec![x, w_ih, w_hh, b_ih, b_hh], GruOp { reverse, traces })
    }

    /// A direction whose weights live in `store` under `prefix`.
    pub fn gru_from_store(&mut self, store: &ParamStore<T>, prefix: &str, x: Var, reverse: bool) -> Result<Var> {
        let w_ih = store.leaf(self, &format!("{prefix}.w_ih"))?;
        let w_hh = store.leaf(self, &format!("{prefix}.w_hh"))?;
        let b_ih = store.leaf(self, &format!("{prefix}.b_ih"))?;
        let b_hh = store.leaf(self, &format!("{prefix}.b_hh"))?;
        self.gru(x, w_ih, w_hh, b_ih, b_hh, reverse)
    }
}

/// Runs one forward direction, or forward and time-reversed directions
/// concatenated along the feature axis when `backward` is given.
pub fn gru_forward<T: Scalar>(
    x: &Tensor<T>,
    forward: &GruWeights<T>,
    backward: Option<&GruWeights<T>>,
) -> Result<Tensor<T>> {
    let (fwd, _) = forward_raw(x, &forward.w_ih, &forward.w_hh, &forward.b_ih, &forward.b_hh, false)?;
    match backward {
        None => Ok(fwd),
        Some(w) => {
            let (bwd, _) = forward_raw(x, &w.w_ih, &w.w_hh, &w.b_ih, &w.b_hh, true)?;
            crate::ops::concat(&[&fwd, &bwd], 2)
        }
    }
}
