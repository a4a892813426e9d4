//! Numeric substrate shared by every stage: distances, the negative-distance
//! softmax, population variance, a pivoted small-matrix inverse and the
//! seeded random stream.
//!
//! All reductions run in a fixed index order so repeated runs agree bitwise.

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Dense row-major double-precision matrix. Feature vectors are rows.
pub type Matrix = Array2<f64>;

/// Norm below which a vector is treated as zero by [`cosine_dist`].
pub const ZERO_NORM: f64 = 1e-12;

/// Largest matrix accepted by [`inv_small`].
pub const MAX_INV_DIM: usize = 512;

/// Condition number (1-norm) above which [`inv_small`] reports singularity.
pub const MAX_CONDITION: f64 = 1e12;

/// Deterministic random stream backed by ChaCha8.
///
/// ChaCha8 is counter based and its output is specified independently of
/// platform word size, so a seed fixes the stream everywhere.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream for a named sub-task; does not advance `self`.
    pub fn fork(&self, stream: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)`.
    pub fn unit(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "Rng::below called with n = 0");
        self.inner.random_range(0..n)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.unit() < p
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

pub fn ensure_finite(m: ArrayView2<'_, f64>, what: &str) -> Result<()> {
    for ((i, j), v) in m.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::Data(format!(
                "{what}: non-finite value {v} at ({i}, {j})"
            )));
        }
    }
    Ok(())
}

/// Squared Euclidean distances between all rows. The result is exactly
/// symmetric with an exactly zero diagonal.
pub fn pairwise_sq_dist(m: ArrayView2<'_, f64>) -> Result<Matrix> {
    ensure_finite(m, "pairwise_sq_dist")?;
    let n = m.nrows();
    if n == 0 {
        return Err(Error::Contract("pairwise_sq_dist needs at least one row".into()));
    }
    let mut out = Matrix::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = sq_dist(m.row(i), m.row(j));
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    Ok(out)
}

pub fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Outcome of a cosine distance evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub distance: f64,
    /// Set when either input had norm below [`ZERO_NORM`]; the distance is
    /// then the neutral value 1.
    pub degenerate: bool,
}

pub fn cosine_dist(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> Cosine {
    assert_eq!(u.len(), v.len(), "cosine_dist: dimension mismatch");
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for (a, b) in u.iter().zip(v.iter()) {
        dot += a * b;
        nu += a * a;
        nv += b * b;
    }
    let (nu, nv) = (nu.sqrt(), nv.sqrt());
    if nu < ZERO_NORM || nv < ZERO_NORM {
        return Cosine {
            distance: 1.0,
            degenerate: true,
        };
    }
    let cos = (dot / (nu * nv)).clamp(-1.0, 1.0);
    Cosine {
        distance: 1.0 - cos,
        degenerate: false,
    }
}

/// `exp(-v_c) / sum exp(-v_c')`, stabilised by subtracting the minimum
/// distance (the maximum of `-v`).
pub fn softmax_neg(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Contract("softmax_neg of an empty vector".into()));
    }
    if let Some(v) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::Data(format!("softmax_neg: non-finite input {v}")));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = values.iter().map(|v| (min - v).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Population variance (divides by the count).
pub fn variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.max(0.0)
}

fn norm_1(m: &Matrix) -> f64 {
    (0..m.ncols())
        .map(|j| m.column(j).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Inverse of a small square matrix by Gauss-Jordan elimination with partial
/// pivoting.
pub fn inv_small(m: ArrayView2<'_, f64>) -> Result<Matrix> {
    let n = m.nrows();
    if n != m.ncols() {
        return Err(Error::Contract(format!(
            "inv_small needs a square matrix, got {}x{}",
            n,
            m.ncols()
        )));
    }
    if n == 0 || n > MAX_INV_DIM {
        return Err(Error::Contract(format!(
            "inv_small supports 1..={MAX_INV_DIM} rows, got {n}"
        )));
    }
    ensure_finite(m, "inv_small")?;

    let mut a = m.to_owned();
    let scale = norm_1(&a);
    if scale == 0.0 {
        return Err(Error::Singular("zero matrix".into()));
    }
    let mut inv = Matrix::eye(n);
    for col in 0..n {
        let mut pivot_row = col;
        let mut best = a[[col, col]].abs();
        for r in (col + 1)..n {
            let v = a[[r, col]].abs();
            if v > best {
                best = v;
                pivot_row = r;
            }
        }
        if best <= f64::EPSILON * scale {
            return Err(Error::Singular(format!("zero pivot in column {col}")));
        }
        if pivot_row != col {
            for k in 0..n {
                a.swap([col, k], [pivot_row, k]);
                inv.swap([col, k], [pivot_row, k]);
            }
        }
        let p = a[[col, col]];
        for k in 0..n {
            a[[col, k]] /= p;
            inv[[col, k]] /= p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = a[[r, col]];
            if f == 0.0 {
                continue;
            }
            for k in 0..n {
                a[[r, k]] -= f * a[[col, k]];
                inv[[r, k]] -= f * inv[[col, k]];
            }
        }
    }
    let cond = scale * norm_1(&inv);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::Singular(format!(
            "condition estimate {cond:e} exceeds {MAX_CONDITION:e}"
        )));
    }
    Ok(inv)
}
