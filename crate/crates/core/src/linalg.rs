//! Small dense and tridiagonal linear-algebra kernels used by the solvers.

use crate::error::{Error, Result};

/// LU factors of a tridiagonal matrix, reusable across right-hand sides.
///
/// Row `i` reads `lower[i] x[i-1] + diag[i] x[i] + upper[i] x[i+1]`;
/// `lower[0]` and `upper[n-1]` are ignored.
#[derive(Debug, Clone)]
pub struct Tridiagonal {
    lower: Vec<f64>,
    /// Modified super-diagonal `c'_i` of the Thomas sweep.
    upper_mod: Vec<f64>,
    /// Reciprocal pivots.
    inv_pivot: Vec<f64>,
}

impl Tridiagonal {
    /// Factorizes after checking strict diagonal dominance row by row.
    pub fn factor(lower: &[f64], diag: &[f64], upper: &[f64]) -> Result<Self> {
        let n = diag.len();
        assert!(n >= 1 && lower.len() == n && upper.len() == n);
        for i in 0..n {
            let off = if i > 0 { lower[i].abs() } else { 0.0 }
                + if i + 1 < n { upper[i].abs() } else { 0.0 };
            if !(diag[i].abs() > off) {
                return Err(Error::NotDiagonallyDominant { row: i });
            }
        }
        let mut upper_mod = vec![0.0; n];
        let mut inv_pivot = vec![0.0; n];
        let mut prev_c = 0.0;
        for i in 0..n {
            let l = if i > 0 { lower[i] } else { 0.0 };
            let pivot = diag[i] - l * prev_c;
            inv_pivot[i] = 1.0 / pivot;
            prev_c = if i + 1 < n { upper[i] * inv_pivot[i] } else { 0.0 };
            upper_mod[i] = prev_c;
        }
        Ok(Tridiagonal { lower: lower.to_vec(), upper_mod, inv_pivot })
    }

    pub fn len(&self) -> usize {
        self.inv_pivot.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inv_pivot.is_empty()
    }

    /// Solves in place: `rhs` becomes the solution.
    pub fn solve_in_place(&self, rhs: &mut [f64]) {
        let n = self.len();
        debug_assert_eq!(rhs.len(), n);
        rhs[0] *= self.inv_pivot[0];
        for i in 1..n {
            rhs[i] = (rhs[i] - self.lower[i] * rhs[i - 1]) * self.inv_pivot[i];
        }
        for i in (0..n - 1).rev() {
            rhs[i] -= self.upper_mod[i] * rhs[i + 1];
        }
    }
}

/// Number of eigenvalues strictly below `x` of the symmetric tridiagonal
/// matrix with diagonal `d` and off-diagonal `e` (`e.len() == d.len() - 1`).
pub fn sturm_count(d: &[f64], e: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = d[0] - x;
    if q < 0.0 {
        count += 1;
    }
    for i in 1..d.len() {
        let denom = if q == 0.0 { f64::EPSILON * (e[i - 1].abs() + 1e-300) } else { q };
        q = d[i] - x - e[i - 1] * e[i - 1] / denom;
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Smallest eigenvalue and its unit eigenvector (positive first nonzero
/// component) of a symmetric tridiagonal matrix, by Sturm bisection followed
/// by inverse iteration.
pub fn smallest_eigenpair(d: &[f64], e: &[f64]) -> (f64, Vec<f64>) {
    let n = d.len();
    assert!(n >= 1 && e.len() + 1 == n);
    if n == 1 {
        return (d[0], vec![1.0]);
    }
    // Gershgorin bounds.
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..n {
        let r = if i > 0 { e[i - 1].abs() } else { 0.0 } + if i + 1 < n { e[i].abs() } else { 0.0 };
        lo = lo.min(d[i] - r);
        hi = hi.max(d[i] + r);
    }
    let scale = lo.abs().max(hi.abs()).max(1e-300);
    while hi - lo > 4.0 * f64::EPSILON * scale {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if sturm_count(d, e, mid) >= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let lambda = 0.5 * (lo + hi);

    // Inverse iteration with a tiny shift below the eigenvalue; the shifted
    // matrix is then positive definite and the Thomas sweep is stable.
    let shift = lambda - 1e3 * f64::EPSILON * scale;
    let diag: Vec<f64> = d.iter().map(|x| x - shift).collect();
    let mut lower = vec![0.0; n];
    let mut upper = vec![0.0; n];
    lower[1..].copy_from_slice(e);
    upper[..n - 1].copy_from_slice(e);
    let mut x = vec![1.0; n];
    for _ in 0..8 {
        thomas_unchecked(&lower, &diag, &upper, &mut x);
        let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in x.iter_mut() {
            *v /= norm;
        }
    }
    if let Some(first) = x.iter().find(|v| v.abs() > 1e-300) {
        if *first < 0.0 {
            for v in x.iter_mut() {
                *v = -*v;
            }
        }
    }
    (lambda, x)
}

/// Plain Thomas sweep without pivot checks.
fn thomas_unchecked(lower: &[f64], diag: &[f64], upper: &[f64], rhs: &mut [f64]) {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut pivot = diag[0];
    c[0] = upper[0] / pivot;
    rhs[0] /= pivot;
    for i in 1..n {
        pivot = diag[i] - lower[i] * c[i - 1];
        c[i] = if i + 1 < n { upper[i] / pivot } else { 0.0 };
        rhs[i] = (rhs[i] - lower[i] * rhs[i - 1]) / pivot;
    }
    for i in (0..n - 1).rev() {
        rhs[i] -= c[i] * rhs[i + 1];
    }
}

/// Row-major dense square matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(n: usize) -> Self {
        Dense { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, x: f64) {
        self.data[i * self.n + j] = x;
    }

    pub fn matmul(&self, other: &Dense) -> Dense {
        let n = self.n;
        let mut out = Dense::zeros(n);
        for i in 0..n {
            for k in 0..n {
                let a = self.data[i * n + k];
                if a == 0.0 {
                    continue;
                }
                let row = &other.data[k * n..(k + 1) * n];
                let dst = &mut out.data[i * n..(i + 1) * n];
                for (d, b) in dst.iter_mut().zip(row) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n;
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.data[i * n..(i + 1) * n];
            *o = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
    }

    pub fn max_abs_diff(&self, other: &Dense) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn inf_norm(&self) -> f64 {
        (0..self.n)
            .map(|i| self.data[i * self.n..(i + 1) * self.n].iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// `exp(a)` by scaling and squaring around a truncated Taylor series.
///
/// For entrywise nonnegative `a` every term is nonnegative, so each entry of
/// the result carries full relative precision, however small.
pub fn expm_scaling_squaring(a: &Dense) -> Dense {
    let norm = a.inf_norm();
    let mut squarings = 0u32;
    let mut scale = 1.0;
    while norm * scale > 0.5 {
        scale *= 0.5;
        squarings += 1;
    }
    let mut scaled = a.clone();
    for x in scaled.data.iter_mut() {
        *x *= scale;
    }
    let mut result = Dense::identity(a.n);
    let mut term = Dense::identity(a.n);
    for k in 1..=30 {
        term = term.matmul(&scaled);
        let inv_k = 1.0 / k as f64;
        for x in term.data.iter_mut() {
            *x *= inv_k;
        }
        let mut biggest: f64 = 0.0;
        for (r, t) in result.data.iter_mut().zip(&term.data) {
            *r += t;
            biggest = biggest.max(t.abs());
        }
        if biggest == 0.0 {
            break;
        }
    }
    for _ in 0..squarings {
        result = result.matmul(&result);
    }
    result
}
