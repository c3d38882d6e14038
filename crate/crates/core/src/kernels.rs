//! Matérn-5/2 kernels for the latent processes and kernel-matrix assembly.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, LmcError, Result};
use crate::linalg::{cholesky_escalating, Factor, BASE_JITTER};
use crate::scalar::Scalar;

/// Isotropic Matérn kernel with smoothness 5/2:
/// `k(r) = s (1 + sqrt(5) r / l + 5 r^2 / (3 l^2)) exp(-sqrt(5) r / l)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Matern52Kernel<T> {
    lengthscale: T,
    output_scale: T,
}

impl<T: Scalar> Matern52Kernel<T> {
    pub fn new(lengthscale: T, output_scale: T) -> Result<Self> {
        if !(lengthscale.finite() && lengthscale > T::zero()) {
            return invalid(format!("lengthscale must be positive, got {lengthscale}"));
        }
        if !(output_scale.finite() && output_scale > T::zero()) {
            return invalid(format!("output scale must be positive, got {output_scale}"));
        }
        Ok(Self {
            lengthscale,
            output_scale,
        })
    }

    pub fn lengthscale(&self) -> T {
        self.lengthscale
    }

    pub fn output_scale(&self) -> T {
        self.output_scale
    }

    /// Kernel value as a function of the distance `r >= 0`.
    #[inline]
    pub fn eval_distance(&self, r: T) -> T {
        let a = T::lit(5f64.sqrt()) * r / self.lengthscale;
        self.output_scale * (T::one() + a + a * a / T::lit(3.0)) * (-a).exp()
    }

    /// Derivative of the kernel value with respect to `ln(lengthscale)`.
    #[inline]
    pub fn d_log_lengthscale(&self, r: T) -> T {
        let a = T::lit(5f64.sqrt()) * r / self.lengthscale;
        self.output_scale * a * a * (T::one() + a) * (-a).exp() / T::lit(3.0)
    }

    /// Default diagonal jitter, relative to the output scale.
    pub fn default_jitter(&self) -> T {
        self.output_scale * T::lit(BASE_JITTER)
    }
}

fn distance<T: Scalar>(x: &[T], y: &[T]) -> T {
    x.iter()
        .zip(y)
        .fold(T::zero(), |acc, (a, b)| acc + (*a - *b) * (*a - *b))
        .sqrt()
}

/// Evaluates the kernel between two points.
pub fn matern52<T: Scalar>(x: &[T], y: &[T], kernel: &Matern52Kernel<T>) -> Result<T> {
    if x.len() != y.len() {
        return Err(LmcError::DimensionMismatch {
            context: "matern52".into(),
            expected: format!("{}", x.len()),
            actual: format!("{}", y.len()),
        });
    }
    if !x.iter().chain(y).all(|v| v.finite()) {
        return invalid("matern52: non-finite input coordinate");
    }
    Ok(kernel.eval_distance(distance(x, y)))
}

fn check_inputs<T: Scalar>(x: &DMatrix<T>, what: &str) -> Result<()> {
    if !x.iter().all(|v| v.finite()) {
        return invalid(format!("{what}: non-finite input coordinate"));
    }
    Ok(())
}

/// `n x n` kernel matrix of the columns of `x` (`d x n`) with `jitter`
/// added on the diagonal.
pub fn kernel_matrix<T: Scalar>(
    x: &DMatrix<T>,
    kernel: &Matern52Kernel<T>,
    jitter: T,
) -> Result<DMatrix<T>> {
    let n = x.ncols();
    if n == 0 {
        return invalid("kernel_matrix needs at least one point");
    }
    if jitter < T::zero() {
        return invalid("jitter must be nonnegative");
    }
    check_inputs(x, "kernel_matrix")?;
    let mut k = DMatrix::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = kernel.output_scale + jitter;
        for i in (j + 1)..n {
            let v = kernel.eval_distance(distance(
                x.column(i).as_slice(),
                x.column(j).as_slice(),
            ));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(k)
}

/// Elementwise derivative of the (unjittered) kernel matrix with respect to
/// `ln(lengthscale)`.
pub fn kernel_matrix_d_log_lengthscale<T: Scalar>(
    x: &DMatrix<T>,
    kernel: &Matern52Kernel<T>,
) -> DMatrix<T> {
    let n = x.ncols();
    let mut d = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in (j + 1)..n {
            let v = kernel.d_log_lengthscale(distance(
                x.column(i).as_slice(),
                x.column(j).as_slice(),
            ));
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

/// `n x m` cross-covariance between training inputs `x` (`d x n`) and test
/// inputs `xstar` (`d x m`). No jitter.
pub fn cross_kernel<T: Scalar>(
    x: &DMatrix<T>,
    xstar: &DMatrix<T>,
    kernel: &Matern52Kernel<T>,
) -> Result<DMatrix<T>> {
    if x.nrows() != xstar.nrows() {
        return Err(LmcError::DimensionMismatch {
            context: "cross_kernel input dimension".into(),
            expected: format!("{}", x.nrows()),
            actual: format!("{}", xstar.nrows()),
        });
    }
    check_inputs(x, "cross_kernel")?;
    check_inputs(xstar, "cross_kernel")?;
    Ok(DMatrix::from_fn(x.ncols(), xstar.ncols(), |j, t| {
        kernel.eval_distance(distance(x.column(j).as_slice(), xstar.column(t).as_slice()))
    }))
}

/// Cholesky factor of the jittered kernel matrix, escalating the jitter on
/// failure.
pub fn kernel_cholesky<T: Scalar>(
    x: &DMatrix<T>,
    kernel: &Matern52Kernel<T>,
    jitter: T,
) -> Result<Factor<T>> {
    let k = kernel_matrix(x, kernel, jitter)?;
    let label = format!(
        "Matern52 kernel matrix (lengthscale {}, output scale {}, jitter {})",
        kernel.lengthscale, kernel.output_scale, jitter
    );
    cholesky_escalating(k, kernel.output_scale, &label)
}

/// The `q` latent kernels of an LMC model, indexed by latent process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentKernelSet<T>(Vec<Matern52Kernel<T>>);

impl<T: Scalar> LatentKernelSet<T> {
    pub fn new(kernels: Vec<Matern52Kernel<T>>) -> Result<Self> {
        if kernels.is_empty() {
            return invalid("at least one latent kernel is required");
        }
        Ok(Self(kernels))
    }

    /// `q` kernels with the given lengthscales and unit output scale.
    pub fn from_lengthscales(lengthscales: &[T]) -> Result<Self> {
        lengthscales
            .iter()
            .map(|&l| Matern52Kernel::new(l, T::one()))
            .collect::<Result<Vec<_>>>()
            .and_then(Self::new)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> &Matern52Kernel<T> {
        &self.0[i]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Matern52Kernel<T>> {
        self.0.iter()
    }

    /// Jittered training kernel matrices `K_i`.
    pub fn train_matrices(&self, x: &DMatrix<T>) -> Result<Vec<DMatrix<T>>> {
        self.0
            .iter()
            .map(|k| kernel_matrix(x, k, k.default_jitter()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // (1 + sqrt 5 + 5/3) exp(-sqrt 5), evaluated with 40-digit arithmetic.
    const GOLDEN_R1: f64 = 0.523_994_108_831_820_3;
    // s = 1.7, l = 0.8, r = 0.37, same high-precision evaluation.
    const GOLDEN_GENERIC: f64 = 1.444_884_828_788_875_4;

    fn k(l: f64, s: f64) -> Matern52Kernel<f64> {
        Matern52Kernel::new(l, s).unwrap()
    }

    #[test]
    fn value_at_zero_distance_is_output_scale() {
        assert_eq!(matern52(&[0.3], &[0.3], &k(0.7, 1.0)).unwrap(), 1.0);
        assert_eq!(matern52(&[0.3, 1.0], &[0.3, 1.0], &k(0.7, 2.5)).unwrap(), 2.5);
    }

    #[test]
    fn golden_values() {
        let v = matern52(&[0.0], &[1.0], &k(1.0, 1.0)).unwrap();
        assert!((v - GOLDEN_R1).abs() < 1e-15);
        let v = matern52(&[0.1, 0.0], &[0.1, 0.37], &k(0.8, 1.7)).unwrap();
        assert!((v - GOLDEN_GENERIC).abs() < 1e-14);
    }

    #[test]
    fn decays_monotonically() {
        let kern = k(0.5, 1.0);
        let mut prev = kern.eval_distance(0.0);
        for i in 1..200 {
            let v = kern.eval_distance(i as f64 * 0.1);
            assert!(v < prev && v > 0.0 || v == 0.0);
            prev = v;
        }
        assert!(kern.eval_distance(50.0) < 1e-60);
    }

    #[test]
    fn flat_at_origin() {
        let kern = k(0.4, 1.3);
        let h: f64 = 1e-6;
        let slope = (kern.eval_distance(h) - kern.eval_distance(0.0)) / h;
        assert!(slope.abs() < 1e-4);
    }

    #[test]
    fn log_lengthscale_derivative_matches_finite_difference() {
        let (l, s, r) = (0.6, 1.4, 0.45);
        let h: f64 = 1e-6;
        let fd = (k(l * h.exp(), s).eval_distance(r) - k(l * (-h).exp(), s).eval_distance(r))
            / (2.0 * h);
        assert!((fd - k(l, s).d_log_lengthscale(r)).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_hyperparameters_and_inputs() {
        assert!(Matern52Kernel::new(0.0, 1.0).is_err());
        assert!(Matern52Kernel::new(1.0, -1.0).is_err());
        assert!(Matern52Kernel::new(f64::NAN, 1.0).is_err());
        assert!(matern52(&[f64::INFINITY], &[0.0], &k(1.0, 1.0)).is_err());
        assert!(matern52(&[0.0, 1.0], &[0.0], &k(1.0, 1.0)).is_err());
    }

    #[test]
    fn single_point_matrix() {
        let x = DMatrix::from_row_slice(1, 1, &[0.2]);
        let m = kernel_matrix(&x, &k(0.3, 2.0), 1e-3).unwrap();
        assert_eq!(m.shape(), (1, 1));
        assert_eq!(m[(0, 0)], 2.001);
    }

    #[test]
    fn duplicated_points_are_singular_without_jitter() {
        let x = DMatrix::from_row_slice(1, 3, &[0.1, 0.1, 0.5]);
        let m = kernel_matrix(&x, &k(0.3, 1.0), 0.0).unwrap();
        assert!(m.clone().cholesky().is_none() || {
            // exact duplicates give two identical rows; the factor must be degenerate
            let l = m.cholesky().unwrap().l();
            l[(1, 1)].abs() < 1e-7
        });
    }

    #[test]
    fn matrix_matches_elementwise_evaluation() {
        let x = DMatrix::from_fn(2, 10, |i, j| ((i * 10 + j) as f64 * 0.77).sin());
        let kern = k(0.45, 1.2);
        let m = kernel_matrix(&x, &kern, 0.0).unwrap();
        for i in 0..10 {
            for j in 0..10 {
                let oracle = matern52(x.column(i).as_slice(), x.column(j).as_slice(), &kern).unwrap();
                assert!((m[(i, j)] - oracle).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn cross_kernel_shapes_and_values() {
        let x = DMatrix::from_fn(1, 6, |_, j| j as f64 * 0.3 - 0.8);
        let kern = k(0.3, 1.0);
        let same = cross_kernel(&x, &x, &kern).unwrap();
        let km = kernel_matrix(&x, &kern, 0.0).unwrap();
        assert!((same - km).abs().max() < 1e-15);
        let empty = cross_kernel(&x, &DMatrix::zeros(1, 0), &kern).unwrap();
        assert_eq!(empty.shape(), (6, 0));
        let xs = DMatrix::from_fn(1, 4, |_, j| 0.11 * j as f64);
        let c = cross_kernel(&x, &xs, &kern).unwrap();
        for j in 0..6 {
            for t in 0..4 {
                let oracle = matern52(&[x[(0, j)]], &[xs[(0, t)]], &kern).unwrap();
                assert!((c[(j, t)] - oracle).abs() < 1e-15);
            }
        }
        assert!(cross_kernel(&x, &DMatrix::zeros(2, 3), &kern).is_err());
    }

    #[test]
    fn cholesky_error_names_kernel() {
        let x = DMatrix::from_row_slice(1, 2, &[f64::NAN, 0.0]);
        assert!(kernel_cholesky(&x, &k(0.3, 1.0), 0.0).is_err());
    }
}
