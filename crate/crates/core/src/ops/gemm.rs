//! Dense matrix products on row-major slices, backed by `matrixmultiply`.

/// Shape of `c[m×n] = op(a)[m×k] · op(b)[k×n]`. A transposed operand is
/// stored as its transpose (`k×m` for `a`, `n×k` for `b`).
#[derive(Clone, Copy, Debug)]
pub struct Gemm {
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub trans_a: bool,
    pub trans_b: bool,
    /// Add into `c` instead of overwriting it.
    pub accumulate: bool,
}

/// Row and column strides of each operand after bounds checks.
pub(crate) struct Strides {
    pub a: (isize, isize),
    pub b: (isize, isize),
    pub c: (isize, isize),
}

impl Gemm {
    pub fn new(m: usize, k: usize, n: usize) -> Self {
        Self {
            m,
            k,
            n,
            trans_a: false,
            trans_b: false,
            accumulate: false,
        }
    }

    pub fn trans_a(self) -> Self {
        Self { trans_a: true, ..self }
    }

    pub fn trans_b(self) -> Self {
        Self { trans_b: true, ..self }
    }

    pub fn accumulate(self) -> Self {
        Self {
            accumulate: true,
            ..self
        }
    }

    /// Panics when a slice is too short for the declared shape.
    pub(crate) fn strides(&self, a: usize, b: usize, c: usize) -> Strides {
        let (m, k, n) = (self.m, self.k, self.n);
        assert!(a >= m * k && b >= k * n && c >= m * n, "gemm operand too short");
        let a = if self.trans_a { (1, m as isize) } else { (k as isize, 1) };
        let b = if self.trans_b { (1, k as isize) } else { (n as isize, 1) };
        Strides {
            a,
            b,
            c: (n as isize, 1),
        }
    }
}

/// Runs `g` on `a`, `b` and `c`.
pub fn gemm<T: crate::tensor::Scalar>(g: Gemm, a: &[T], b: &[T], c: &mut [T]) {
    if g.m == 0 || g.n == 0 {
        return;
    }
    if g.k == 0 {
        if !g.accumulate {
            c[..g.m * g.n].fill(T::zero());
        }
        return;
    }
    T::gemm(g, a, b, c);
}
