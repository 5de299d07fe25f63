//! Dense linear algebra used throughout the crate: Cholesky factorization,
//! Gaussian fitting with ridge regularization, multivariate normal
//! log-densities and interpolated percentiles.
//!
//! Storage is plain `ndarray` (row-major, `f64`). The factorization and the
//! triangular solves are written against contiguous row slices so that the
//! 1024-dimensional latent blocks produced by the classifiers stay fast
//! without pulling in LAPACK.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;
pub type Vector = Array1<f64>;

/// Smallest ridge ever added to a covariance diagonal.
pub const MIN_RIDGE: f64 = 1e-10;

/// Default relative ridge: `lambda = ridge_scale * trace(cov) / d`.
pub const DEFAULT_RIDGE_SCALE: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Dot product with four independent accumulators so the loop vectorizes.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

/// Lower-triangular Cholesky factor `L` with `L * L^T = a`.
///
/// Only the lower triangle of `a` is read.
pub fn cholesky(a: ArrayView2<f64>) -> Result<Matrix> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: a.ncols(),
        });
    }
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s = a[[i, j]] - dot(&l[i * n..i * n + j], &l[j * n..j * n + j]);
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(Error::NotPositiveDefinite { row: i, pivot: s });
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Ok(Array2::from_shape_vec((n, n), l).expect("shape matches buffer"))
}

/// Solves `L z = b` in place for lower-triangular `L` stored row-major.
fn forward_substitute_in_place(l: &[f64], n: usize, z: &mut [f64]) {
    for i in 0..n {
        let row = &l[i * n..i * n + i];
        let s = z[i] - dot(row, &z[..i]);
        z[i] = s / l[i * n + i];
    }
}

/// Solves `L z = b` for lower-triangular `L`.
pub fn solve_lower(l: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Vector> {
    let n = l.nrows();
    if b.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            actual: b.len(),
        });
    }
    let l = l.as_standard_layout();
    let mut z = b.to_vec();
    forward_substitute_in_place(l.as_slice().expect("standard layout"), n, &mut z);
    Ok(Array1::from(z))
}

/// Multivariate normal density with a ridge-regularized covariance, kept in
/// factored form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianDensity {
    mean: Vector,
    chol_lower: Matrix,
    log_det: f64,
    reg_lambda: f64,
}

impl GaussianDensity {
    /// Rebuilds a density from a stored mean and factor. The log-determinant
    /// is recomputed from the factor diagonal.
    pub fn from_parts(mean: Vector, chol_lower: Matrix, reg_lambda: f64) -> Result<Self> {
        let d = mean.len();
        if chol_lower.nrows() != d || chol_lower.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: chol_lower.nrows(),
            });
        }
        if !(reg_lambda >= 0.0) {
            return Err(Error::BadParameter(format!(
                "reg_lambda must be non-negative, got {reg_lambda}"
            )));
        }
        for i in 0..d {
            if !(chol_lower[[i, i]] > 0.0) {
                return Err(Error::BadParameter(format!(
                    "factor diagonal entry {i} is not positive"
                )));
            }
            for j in i + 1..d {
                if chol_lower[[i, j]] != 0.0 {
                    return Err(Error::BadParameter(
                        "factor is not lower-triangular".into(),
                    ));
                }
            }
        }
        let log_det = log_det_from_factor(chol_lower.view());
        Ok(Self {
            mean,
            chol_lower: chol_lower.as_standard_layout().into_owned(),
            log_det,
            reg_lambda,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn chol_lower(&self) -> &Matrix {
        &self.chol_lower
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn reg_lambda(&self) -> f64 {
        self.reg_lambda
    }

    /// Regularized covariance `L L^T`.
    pub fn covariance(&self) -> Matrix {
        self.chol_lower.dot(&self.chol_lower.t())
    }

    /// Squared Mahalanobis distance of `x` from the mean.
    pub fn mahalanobis_sq(&self, x: ArrayView1<f64>) -> Result<f64> {
        let d = self.dim();
        if x.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: x.len(),
            });
        }
        let mut z: Vec<f64> = x.iter().zip(self.mean.iter()).map(|(a, m)| a - m).collect();
        let l = self.chol_lower.as_slice().expect("standard layout");
        forward_substitute_in_place(l, d, &mut z);
        Ok(dot(&z, &z))
    }

    /// Natural-log density of `x`, including the full normalization constant.
    pub fn log_density(&self, x: ArrayView1<f64>) -> Result<f64> {
        let m2 = self.mahalanobis_sq(x)?;
        Ok(self.log_density_from_mahalanobis(m2))
    }

    /// Log-density of every row of `xs`, evaluated in parallel.
    pub fn log_density_rows(&self, xs: ArrayView2<f64>) -> Result<Vector> {
        if xs.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: xs.ncols(),
            });
        }
        let out: Vec<f64> = (0..xs.nrows())
            .into_par_iter()
            .map(|i| self.log_density(xs.row(i)).expect("dimension checked"))
            .collect();
        Ok(Array1::from(out))
    }

    fn log_density_from_mahalanobis(&self, m2: f64) -> f64 {
        -0.5 * (self.dim() as f64 * LN_2PI + self.log_det + m2)
    }
}

fn log_det_from_factor(l: ArrayView2<f64>) -> f64 {
    2.0 * l.diag().iter().map(|v| v.ln()).sum::<f64>()
}

/// Fits a Gaussian to the rows of `samples` (one sample per row).
///
/// The unbiased covariance receives a ridge of
/// `max(ridge_scale * trace / d, MIN_RIDGE)` on its diagonal. If rounding
/// still leaves a non-positive pivot the ridge is grown tenfold until the
/// factorization succeeds, so rank-deficient blocks are always accepted.
pub fn fit_gaussian(samples: ArrayView2<f64>, ridge_scale: f64) -> Result<GaussianDensity> {
    let (n, d) = samples.dim();
    if n < 2 {
        return Err(Error::DegenerateSampleCount(n));
    }
    if d == 0 {
        return Err(Error::BadParameter("samples must have at least one column".into()));
    }
    if !(ridge_scale >= 0.0) || !ridge_scale.is_finite() {
        return Err(Error::BadParameter(format!(
            "ridge_scale must be finite and non-negative, got {ridge_scale}"
        )));
    }
    let mean = samples.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &samples - &mean;
    let mut cov = centered.t().dot(&centered);
    cov /= (n - 1) as f64;

    let trace = cov.diag().sum();
    let mut reg_lambda = (ridge_scale * trace / d as f64).max(MIN_RIDGE);
    loop {
        let mut reg = cov.clone();
        reg.diag_mut().mapv_inplace(|v| v + reg_lambda);
        match cholesky(reg.view()) {
            Ok(chol_lower) => {
                let log_det = log_det_from_factor(chol_lower.view());
                return Ok(GaussianDensity {
                    mean,
                    chol_lower,
                    log_det,
                    reg_lambda,
                });
            }
            Err(Error::NotPositiveDefinite { .. }) if reg_lambda.is_finite() => {
                reg_lambda *= 10.0;
            }
            Err(e) => return Err(e),
        }
    }
}

/// Unbiased sample covariance of the rows of `samples`, without regularization.
pub fn sample_covariance(samples: ArrayView2<f64>) -> Result<Matrix> {
    let n = samples.nrows();
    if n < 2 {
        return Err(Error::DegenerateSampleCount(n));
    }
    let mean = samples.mean_axis(Axis(0)).expect("n >= 2");
    let centered = &samples - &mean;
    Ok(centered.t().dot(&centered) / (n - 1) as f64)
}

/// Percentile `p` (0..=100) by linear interpolation at fractional index
/// `(n - 1) * p / 100` of the ascending sort.
pub fn percentile(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::BadParameter(format!("percentile {p} outside [0, 100]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::BadParameter("percentile input contains NaN".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(percentile_of_sorted(&sorted, p))
}

pub(crate) fn percentile_of_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let pos = (n - 1) as f64 * p / 100.0;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    if frac == 0.0 || lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn cholesky_identity_and_scalar() {
        let l = cholesky(Array2::<f64>::eye(2).view()).unwrap();
        assert_eq!(l, Array2::<f64>::eye(2));
        let l = cholesky(array![[9.0]].view()).unwrap();
        assert_eq!(l, array![[3.0]]);
    }

    #[test]
    fn cholesky_reproduces_input() {
        let a = array![[4.0, 2.0], [2.0, 3.0]];
        let l = cholesky(a.view()).unwrap();
        assert_eq!(l[[0, 1]], 0.0);
        let back = l.dot(&l.t());
        for (x, y) in back.iter().zip(a.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0, 2.0], [2.0, 1.0]];
        assert!(matches!(
            cholesky(a.view()),
            Err(Error::NotPositiveDefinite { row: 1, .. })
        ));
        assert!(matches!(
            cholesky(array![[0.0]].view()),
            Err(Error::NotPositiveDefinite { row: 0, .. })
        ));
    }

    #[test]
    fn fit_gaussian_constant_samples_get_floor_ridge() {
        let v = [0.25, 0.5, 0.75];
        let samples = Array2::from_shape_fn((5, 3), |(_, j)| v[j]);
        let g = fit_gaussian(samples.view(), DEFAULT_RIDGE_SCALE).unwrap();
        assert_eq!(g.mean().to_vec(), v.to_vec());
        assert_eq!(g.reg_lambda(), MIN_RIDGE);
        let cov = g.covariance();
        for i in 0..3 {
            for j in 0..3 {
                let expected = if i == j { MIN_RIDGE } else { 0.0 };
                assert_abs_diff_eq!(cov[[i, j]], expected, epsilon = 1e-24);
            }
        }
    }

    #[test]
    fn fit_gaussian_square_corners() {
        let samples = array![[0.0, 0.0], [1.0, 1.0], [0.0, 1.0], [1.0, 0.0]];
        let raw = sample_covariance(samples.view()).unwrap();
        assert_abs_diff_eq!(raw[[0, 0]], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(raw[[1, 1]], 1.0 / 3.0, epsilon = 1e-15);
        assert_abs_diff_eq!(raw[[0, 1]], 0.0, epsilon = 1e-15);
        let g = fit_gaussian(samples.view(), DEFAULT_RIDGE_SCALE).unwrap();
        assert_eq!(g.mean().to_vec(), vec![0.5, 0.5]);
        assert_abs_diff_eq!(g.reg_lambda(), 1e-6 / 3.0, epsilon = 1e-20);
        let cov = g.covariance();
        assert_abs_diff_eq!(cov[[0, 0]], 1.0 / 3.0 + g.reg_lambda(), epsilon = 1e-14);
    }

    #[test]
    fn fit_gaussian_needs_two_samples() {
        let one = array![[1.0, 2.0]];
        assert!(matches!(
            fit_gaussian(one.view(), 1e-6),
            Err(Error::DegenerateSampleCount(1))
        ));
    }

    #[test]
    fn fit_gaussian_rank_deficient_block() {
        // 3 samples in 10 dimensions, with several constant columns.
        let samples = Array2::from_shape_fn((3, 10), |(i, j)| if j < 4 { (i * j) as f64 } else { 1.0 });
        let g = fit_gaussian(samples.view(), 1e-6).unwrap();
        assert!(g.log_det().is_finite());
        assert!(g.log_density(samples.row(0)).unwrap().is_finite());
    }

    #[test]
    fn log_density_standard_normal() {
        let g = GaussianDensity::from_parts(array![1.0, -2.0], Array2::eye(2), 0.0).unwrap();
        let at_mean = g.log_density(array![1.0, -2.0].view()).unwrap();
        assert_abs_diff_eq!(at_mean, -1.837_877_066_4, epsilon = 1e-10);
        let off = g.log_density(array![2.0, -2.0].view()).unwrap();
        assert_abs_diff_eq!(off, -LN_2PI - 0.5, epsilon = 1e-14);
        assert!(matches!(
            g.log_density(array![1.0].view()),
            Err(Error::DimensionMismatch { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn log_density_rows_matches_single() {
        let samples = array![[0.0, 0.1], [1.0, 1.3], [0.2, 1.0], [1.0, 0.0], [0.5, 0.4]];
        let g = fit_gaussian(samples.view(), 1e-3).unwrap();
        let batch = g.log_density_rows(samples.view()).unwrap();
        for (i, row) in samples.axis_iter(Axis(0)).enumerate() {
            assert_eq!(batch[i], g.log_density(row).unwrap());
        }
    }

    #[test]
    fn from_parts_validates_factor() {
        let upper = array![[1.0, 0.5], [0.0, 1.0]];
        assert!(GaussianDensity::from_parts(array![0.0, 0.0], upper, 0.0).is_err());
        let neg = array![[1.0, 0.0], [0.5, -1.0]];
        assert!(GaussianDensity::from_parts(array![0.0, 0.0], neg, 0.0).is_err());
    }

    #[test]
    fn percentile_conventions() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0).unwrap(), 50.5);
        let w = [3.0, -1.0, 7.5, 2.0];
        assert_eq!(percentile(&w, 0.0).unwrap(), -1.0);
        assert_eq!(percentile(&w, 100.0).unwrap(), 7.5);
        assert!(matches!(percentile(&[], 10.0), Err(Error::EmptyInput)));
        assert!(percentile(&w, 101.0).is_err());
    }
}
