//! Dense row-major linear algebra, statistics and a finite-difference
//! gradient oracle.
//!
//! Everything is `f64`. Shapes are explicit and never broadcast: a mismatch
//! is reported as [`Error::DimensionMismatch`].

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// `self · other`
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut out)?;
        Ok(out)
    }

    /// `self · otherᵀ`
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(1.0, self, false, other, true, 0.0, &mut out)?;
        Ok(out)
    }

    /// `selfᵀ · other`
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(1.0, self, true, other, false, 0.0, &mut out)?;
        Ok(out)
    }

    /// `self · v` for a column vector `v`.
    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        if v.dim() != self.cols {
            return Err(Error::DimensionMismatch(format!(
                "matvec: {}x{} matrix with vector of dim {}",
                self.rows,
                self.cols,
                v.dim()
            )));
        }
        let out = (0..self.rows).map(|r| dot(self.row(r), v.as_slice())).collect();
        Ok(Vector::new(out))
    }

    /// `selfᵀ · v`, i.e. the weighted sum of rows with weights `v`.
    pub fn t_matvec(&self, v: &Vector) -> Result<Vector> {
        if v.dim() != self.rows {
            return Err(Error::DimensionMismatch(format!(
                "t_matvec: {}x{} matrix with vector of dim {}",
                self.rows,
                self.cols,
                v.dim()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for (r, &w) in v.as_slice().iter().enumerate() {
            axpy(w, self.row(r), &mut out);
        }
        Ok(Vector::new(out))
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::DimensionMismatch(format!(
                "add: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Dense real vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn scaled(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|v| v * s).collect())
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// General matrix multiply: `c ← alpha · op(a) · op(b) + beta · c`.
///
/// `op` transposes when the corresponding flag is set. With `beta == 0` the
/// previous contents of `c` are ignored.
pub fn gemm(
    alpha: f64,
    a: &Matrix,
    trans_a: bool,
    b: &Matrix,
    trans_b: bool,
    beta: f64,
    c: &mut Matrix,
) -> Result<()> {
    let (m, k) = if trans_a {
        (a.cols, a.rows)
    } else {
        (a.rows, a.cols)
    };
    let (kb, n) = if trans_b {
        (b.cols, b.rows)
    } else {
        (b.rows, b.cols)
    };
    if k != kb || c.rows != m || c.cols != n {
        return Err(Error::DimensionMismatch(format!(
            "gemm: op(a) {m}x{k}, op(b) {kb}x{n}, c {}x{}",
            c.rows, c.cols
        )));
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        if beta == 0.0 {
            c.data.fill(0.0);
        } else {
            c.scale(beta);
        }
        return Ok(());
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: dimensions and strides were validated against the buffer
    // lengths above; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
    Ok(())
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: &Vector) -> Result<Vector> {
    let mut out = v.as_slice().to_vec();
    softmax_in_place(&mut out)?;
    Ok(Vector::new(out))
}

pub(crate) fn softmax_in_place(v: &mut [f64]) -> Result<()> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("softmax input".into()));
    }
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
    Ok(())
}

/// `log Σ exp(v)` computed with max subtraction.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("log_sum_exp input".into()));
    }
    Ok(max + ln_sum_exp_shifted(v, max))
}

/// `ln Σ exp(x − max)`, with the largest term's 1 split out so that
/// near-one-hot inputs keep full relative precision.
fn ln_sum_exp_shifted(v: &[f64], max: f64) -> f64 {
    let top = v.iter().position(|x| *x == max).expect("max is an element");
    let rest: f64 = v
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != top)
        .map(|(_, x)| (x - max).exp())
        .sum();
    rest.ln_1p()
}

/// `−log softmax(logits)[target]`.
pub fn cross_entropy(logits: &Vector, target: usize) -> Result<f64> {
    cross_entropy_slice(logits.as_slice(), target)
}

pub(crate) fn cross_entropy_slice(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::IndexOutOfRange {
            index: target,
            len: logits.len(),
        });
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::NonFinite("cross-entropy logits".into()));
    }
    Ok((max - logits[target]) + ln_sum_exp_shifted(logits, max))
}

pub fn mean(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Pearson correlation coefficient.
///
/// Fails with [`Error::ZeroVariance`] when either input is constant; callers
/// report that as undefined rather than substituting 0.
pub fn pearson_corr(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "pearson_corr: lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(
            "pearson_corr needs at least two observations".into(),
        ));
    }
    let mx = mean(x)?;
    let my = mean(y)?;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let dx = a - mx;
        let dy = b - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// Two-sided permutation p-value for the Pearson correlation between `x`
/// and a binary label sequence `y`.
///
/// Returns `(1 + #{|r_perm| ≥ |r_obs|}) / (1 + n_perm)`; labels are shuffled
/// with a ChaCha8 stream seeded by `seed`.
pub fn perm_pvalue(x: &[f64], y: &[bool], n_perm: usize, seed: u64) -> Result<f64> {
    if n_perm < 100 {
        return Err(Error::InvalidArgument(format!(
            "n_perm must be at least 100, got {n_perm}"
        )));
    }
    let mut labels: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let observed = pearson_corr(x, &labels)?.abs();
    // Permutations that reproduce the observed arrangement can differ from it
    // in the last bits through summation order.
    let threshold = observed - 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut exceed = 0usize;
    for _ in 0..n_perm {
        labels.shuffle(&mut rng);
        if pearson_corr(x, &labels)?.abs() >= threshold {
            exceed += 1;
        }
    }
    Ok((1 + exceed) as f64 / (1 + n_perm) as f64)
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(f: F, x: &Vector, h: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> f64,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "step h must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.dim());
    for i in 0..x.dim() {
        let orig = probe.0[i];
        probe.0[i] = orig + h;
        let up = f(&probe);
        probe.0[i] = orig - h;
        let down = f(&probe);
        probe.0[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective at coordinate {i} (f(x+h)={up}, f(x-h)={down})"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(Vector::new(grad))
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are zero.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}
