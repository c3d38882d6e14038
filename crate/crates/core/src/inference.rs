//! Posteriors and marginal likelihoods of the LMC: the dense path over the
//! full `np x np` covariance, and the decoupled path that only factorizes
//! `q` matrices of size `n x n`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dims, invalid, LmcError, Result};
use crate::kernels::{cross_kernel, LatentKernelSet};
use crate::linalg::{cholesky_escalating, lower_triangular_inverse, symmetrize, Factor};
use crate::noise_param::{build_sigma, build_sigma_inverse, compute_t, NoiseParametrization};
use crate::scalar::Scalar;

/// Largest `n * p` accepted by the dense paths.
pub const NAIVE_SIZE_LIMIT: usize = 4000;

/// Training data: inputs `x` (`d x n`) and outputs `y` (`p x n`, one row
/// per task).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T: Scalar> {
    pub x: DMatrix<T>,
    pub y: DMatrix<T>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(x: DMatrix<T>, y: DMatrix<T>) -> Result<Self> {
        if x.ncols() != y.ncols() {
            return Err(LmcError::DimensionMismatch {
                context: "Dataset: X and Y column counts".into(),
                expected: x.ncols().to_string(),
                actual: y.ncols().to_string(),
            });
        }
        if x.ncols() == 0 || x.nrows() == 0 || y.nrows() == 0 {
            return invalid("Dataset must be non-empty");
        }
        if !x.iter().chain(y.iter()).all(|v| v.finite()) {
            return invalid("Dataset entries must be finite");
        }
        Ok(Self { x, y })
    }

    pub fn n_points(&self) -> usize {
        self.x.ncols()
    }

    pub fn n_tasks(&self) -> usize {
        self.y.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.x.nrows()
    }

    /// Task-major stacking of the outputs: entry `a * n + j` is `Y[a, j]`.
    pub fn y_v(&self) -> DVector<T> {
        stack_rows(&self.y)
    }
}

fn stack_rows<T: Scalar>(y: &DMatrix<T>) -> DVector<T> {
    let (p, n) = y.shape();
    DVector::from_fn(p * n, |k, _| y[(k / n, k % n)])
}

/// Whether predictions carry a full `p x p` covariance per test point.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum CovarianceMode {
    #[default]
    Marginal,
    Full,
}

/// Posterior predictive summary at `m` test points. Task quantities are
/// for the noise-free outputs `H u`; `noise_var` holds `diag(Σ)`.
#[derive(Debug, Clone)]
pub struct PredictionResult<T: Scalar> {
    /// `p x m`
    pub mean: DMatrix<T>,
    /// `p x m` marginal variances.
    pub task_var: DMatrix<T>,
    /// One `p x p` matrix per test point in [`CovarianceMode::Full`].
    pub task_cov: Option<Vec<DMatrix<T>>>,
    /// `q x m`
    pub latent_mean: DMatrix<T>,
    /// `q x m`
    pub latent_var: DMatrix<T>,
    pub noise_var: DVector<T>,
}

/// Posterior of the latent processes at the training inputs.
#[derive(Debug, Clone)]
pub struct LatentPosterior<T: Scalar> {
    /// `q x n`
    pub mean: DMatrix<T>,
    /// One `n x n` block per latent process.
    pub cov: Vec<DMatrix<T>>,
}

/// Dense posterior of `U` stacked latent-major (`i * n + j`).
#[derive(Debug, Clone)]
pub struct DenseLatentPosterior<T: Scalar> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
}

/// Split of the log-likelihood into the corrective factor and the
/// likelihood of the projected data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LikelihoodDecomposition<T> {
    pub log_corrective: T,
    pub log_latent: T,
}

fn check_model<T: Scalar>(
    data: &Dataset<T>,
    h: &DMatrix<T>,
    kernels: &LatentKernelSet<T>,
) -> Result<()> {
    let p = data.n_tasks();
    check_dims("H", (p, kernels.len()), h.shape())
}

fn check_test_inputs<T: Scalar>(data: &Dataset<T>, xstar: &DMatrix<T>) -> Result<()> {
    if xstar.nrows() != data.input_dim() {
        return Err(LmcError::DimensionMismatch {
            context: "test input dimension".into(),
            expected: data.input_dim().to_string(),
            actual: xstar.nrows().to_string(),
        });
    }
    Ok(())
}

fn size_guard(n: usize, p: usize) -> Result<()> {
    if n * p > NAIVE_SIZE_LIMIT {
        return Err(LmcError::SizeGuard {
            np: n * p,
            limit: NAIVE_SIZE_LIMIT,
        });
    }
    Ok(())
}

/// `𝒦 = Σ_i (h_i h_iᵀ) ⊗ K_i + Σ ⊗ I_n` in task-major ordering.
pub fn full_covariance<T: Scalar>(
    h: &DMatrix<T>,
    kmats: &[DMatrix<T>],
    sigma: &DMatrix<T>,
) -> DMatrix<T> {
    let p = h.nrows();
    let n = kmats[0].nrows();
    let mut big = DMatrix::zeros(n * p, n * p);
    for b in 0..p {
        for a in b..p {
            let mut block = DMatrix::zeros(n, n);
            for (i, k) in kmats.iter().enumerate() {
                let w = h[(a, i)] * h[(b, i)];
                if w != T::zero() {
                    block += k * w;
                }
            }
            for j in 0..n {
                block[(j, j)] += sigma[(a, b)];
            }
            big.view_mut((a * n, b * n), (n, n)).copy_from(&block);
            if a != b {
                big.view_mut((b * n, a * n), (n, n))
                    .copy_from(&block.transpose());
            }
        }
    }
    big
}

fn factor_full<T: Scalar>(big: DMatrix<T>) -> Result<Factor<T>> {
    let scale = (0..big.nrows()).fold(T::zero(), |m, i| m.max(big[(i, i)]));
    cholesky_escalating(big, scale, "dense LMC covariance")
}

/// Dense posterior predictive of the LMC, the reference every other path
/// is checked against.
pub fn naive_posterior<T: Scalar>(
    data: &Dataset<T>,
    h: &DMatrix<T>,
    sigma: &DMatrix<T>,
    kernels: &LatentKernelSet<T>,
    xstar: &DMatrix<T>,
    mode: CovarianceMode,
) -> Result<PredictionResult<T>> {
    check_model(data, h, kernels)?;
    check_test_inputs(data, xstar)?;
    let (p, n, q, m) = (data.n_tasks(), data.n_points(), kernels.len(), xstar.ncols());
    check_dims("Sigma", (p, p), sigma.shape())?;
    size_guard(n, p)?;
    let kmats = kernels.train_matrices(&data.x)?;
    let factor = factor_full(full_covariance(h, &kmats, sigma))?;
    let alpha = factor.solve_vec(&data.y_v());
    let alpha_mat = DMatrix::from_fn(p, n, |a, j| alpha[a * n + j]);
    let projected = h.transpose() * alpha_mat;
    let linv = lower_triangular_inverse(&factor.chol.l());
    let cross: Vec<DMatrix<T>> = kernels
        .iter()
        .map(|k| cross_kernel(&data.x, xstar, k))
        .collect::<Result<_>>()?;

    let mut latent_mean = DMatrix::zeros(q, m);
    for i in 0..q {
        latent_mean
            .row_mut(i)
            .copy_from(&(projected.row(i) * &cross[i]));
    }
    let mut latent_var = DMatrix::zeros(q, m);
    let mut task_var = DMatrix::zeros(p, m);
    let mut task_cov = (mode == CovarianceMode::Full).then(Vec::new);
    const CHUNK: usize = 64;
    let mut start = 0;
    while start < m {
        let len = CHUNK.min(m - start);
        // column (t, i): H_i ⊗ k_i(X, x*_t)
        let mut c = DMatrix::zeros(n * p, len * q);
        for t in 0..len {
            for i in 0..q {
                for a in 0..p {
                    let w = h[(a, i)];
                    for j in 0..n {
                        c[(a * n + j, t * q + i)] = w * cross[i][(j, start + t)];
                    }
                }
            }
        }
        let w = &linv * c;
        for t in 0..len {
            let wt = w.columns(t * q, q);
            let mut cov = -(wt.transpose() * wt);
            for i in 0..q {
                cov[(i, i)] += kernels.get(i).output_scale();
            }
            symmetrize(&mut cov);
            for i in 0..q {
                latent_var[(i, start + t)] = cov[(i, i)];
            }
            let tc = h * &cov * h.transpose();
            for a in 0..p {
                task_var[(a, start + t)] = tc[(a, a)];
            }
            if let Some(v) = task_cov.as_mut() {
                v.push(tc);
            }
        }
        start += len;
    }
    Ok(PredictionResult {
        mean: h * &latent_mean,
        task_var,
        task_cov,
        latent_mean,
        latent_var,
        noise_var: sigma.diagonal(),
    })
}

/// Dense log marginal likelihood `log p(Y)`.
pub fn naive_mll<T: Scalar>(
    data: &Dataset<T>,
    h: &DMatrix<T>,
    sigma: &DMatrix<T>,
    kernels: &LatentKernelSet<T>,
) -> Result<T> {
    check_model(data, h, kernels)?;
    let (p, n) = (data.n_tasks(), data.n_points());
    check_dims("Sigma", (p, p), sigma.shape())?;
    size_guard(n, p)?;
    let kmats = kernels.train_matrices(&data.x)?;
    let factor = factor_full(full_covariance(h, &kmats, sigma))?;
    let yv = data.y_v();
    let quad = yv.dot(&factor.solve_vec(&yv));
    let half = T::lit(0.5);
    Ok(-half * (quad + factor.log_det() + T::count(n * p) * T::ln_2pi()))
}

/// Factors of `A_i = K_i + σ_i² I`, one per latent process.
pub fn latent_factors<T: Scalar>(
    kmats: &[DMatrix<T>],
    sigma_p: &DVector<T>,
) -> Result<Vec<Factor<T>>> {
    kmats
        .iter()
        .enumerate()
        .map(|(i, k)| {
            let mut a = k.clone();
            for j in 0..a.nrows() {
                a[(j, j)] += sigma_p[i];
            }
            let scale = a[(0, 0)];
            cholesky_escalating(a, scale, &format!("latent block {i} (K_i + sigma_i^2 I)"))
        })
        .collect()
}

fn check_params<T: Scalar>(
    data: &Dataset<T>,
    params: &NoiseParametrization<T>,
    kernels: &LatentKernelSet<T>,
) -> Result<()> {
    check_dims(
        "parametrization (p, q)",
        (data.n_tasks(), kernels.len()),
        (params.n_tasks(), params.n_latent()),
    )
}

/// Posterior predictive through `q` independent single-output problems on
/// the projected targets `T Y` with noise variances `Σ_P`.
pub fn decoupled_posterior<T: Scalar>(
    data: &Dataset<T>,
    params: &NoiseParametrization<T>,
    kernels: &LatentKernelSet<T>,
    xstar: &DMatrix<T>,
    mode: CovarianceMode,
) -> Result<PredictionResult<T>> {
    check_params(data, params, kernels)?;
    check_test_inputs(data, xstar)?;
    let (p, q, m) = (data.n_tasks(), kernels.len(), xstar.ncols());
    let kmats = kernels.train_matrices(&data.x)?;
    let factors = latent_factors(&kmats, params.sigma_p())?;
    let z = compute_t(params) * &data.y;
    let mut latent_mean = DMatrix::zeros(q, m);
    let mut latent_var = DMatrix::zeros(q, m);
    for (i, f) in factors.iter().enumerate() {
        let kc = cross_kernel(&data.x, xstar, kernels.get(i))?;
        let alpha = f.solve_vec(&z.row(i).transpose());
        latent_mean.row_mut(i).copy_from(&(alpha.transpose() * &kc));
        let w = lower_triangular_inverse(&f.chol.l()) * kc;
        let s = kernels.get(i).output_scale();
        for t in 0..m {
            latent_var[(i, t)] = s - w.column(t).norm_squared();
        }
    }
    let h = params.h();
    let h2 = h.map(|v| v * v);
    let task_cov = (mode == CovarianceMode::Full).then(|| {
        (0..m)
            .map(|t| {
                let mut c = &h * DMatrix::from_diagonal(&latent_var.column(t).into_owned())
                    * h.transpose();
                symmetrize(&mut c);
                c
            })
            .collect()
    });
    let sigma = build_sigma(params)?;
    debug_assert_eq!(sigma.nrows(), p);
    Ok(PredictionResult {
        mean: &h * &latent_mean,
        task_var: &h2 * &latent_var,
        task_cov,
        latent_mean,
        latent_var,
        noise_var: sigma.diagonal(),
    })
}

/// Latent posterior at the training inputs, one independent block per
/// latent process.
pub fn posterior_u<T: Scalar>(
    data: &Dataset<T>,
    params: &NoiseParametrization<T>,
    kernels: &LatentKernelSet<T>,
) -> Result<LatentPosterior<T>> {
    check_params(data, params, kernels)?;
    let q = kernels.len();
    let kmats = kernels.train_matrices(&data.x)?;
    let factors = latent_factors(&kmats, params.sigma_p())?;
    let z = compute_t(params) * &data.y;
    let mut mean = DMatrix::zeros(q, data.n_points());
    let mut cov = Vec::with_capacity(q);
    for (i, f) in factors.iter().enumerate() {
        let zi = z.row(i).transpose();
        let mi = &kmats[i] * f.solve_vec(&zi);
        mean.row_mut(i).copy_from(&mi.transpose());
        let w = lower_triangular_inverse(&f.chol.l()) * &kmats[i];
        let mut c = &kmats[i] - w.transpose() * w;
        symmetrize(&mut c);
        cov.push(c);
    }
    Ok(LatentPosterior { mean, cov })
}

/// Dense latent posterior for an arbitrary noise covariance, without any
/// decoupling assumption.
pub fn posterior_u_dense<T: Scalar>(
    data: &Dataset<T>,
    h: &DMatrix<T>,
    sigma: &DMatrix<T>,
    kernels: &LatentKernelSet<T>,
) -> Result<DenseLatentPosterior<T>> {
    check_model(data, h, kernels)?;
    let (p, n, q) = (data.n_tasks(), data.n_points(), kernels.len());
    check_dims("Sigma", (p, p), sigma.shape())?;
    size_guard(n, p.max(q))?;
    let kmats = kernels.train_matrices(&data.x)?;
    let factor = factor_full(full_covariance(h, &kmats, sigma))?;
    // cross covariance between U (latent-major) and Y (task-major)
    let mut cross = DMatrix::zeros(n * p, n * q);
    for i in 0..q {
        for a in 0..p {
            cross
                .view_mut((a * n, i * n), (n, n))
                .copy_from(&(&kmats[i] * h[(a, i)]));
        }
    }
    let alpha = factor.solve_vec(&data.y_v());
    let mean = cross.transpose() * alpha;
    let w = lower_triangular_inverse(&factor.chol.l()) * &cross;
    let mut cov = -(w.transpose() * w);
    for i in 0..q {
        let mut block = cov.view_mut((i * n, i * n), (n, n));
        block += &kmats[i];
    }
    symmetrize(&mut cov);
    Ok(DenseLatentPosterior { mean, cov })
}

fn gaussian_log_density<T: Scalar>(factor: &Factor<T>, v: &DVector<T>) -> T {
    let half = T::lit(0.5);
    -half * (v.dot(&factor.solve_vec(v)) + factor.log_det() + T::count(v.len()) * T::ln_2pi())
}

fn log_latent<T: Scalar>(
    data: &Dataset<T>,
    params: &NoiseParametrization<T>,
    kernels: &LatentKernelSet<T>,
) -> Result<T> {
    let kmats = kernels.train_matrices(&data.x)?;
    let factors = latent_factors(&kmats, params.sigma_p())?;
    let z = compute_t(params) * &data.y;
    Ok(factors
        .iter()
        .enumerate()
        .fold(T::zero(), |acc, (i, f)| {
            acc + gaussian_log_density(f, &z.row(i).transpose())
        }))
}

/// `log p(Y)` from the decoupled expression: corrective terms in
/// `(R, L, Q⊥)` plus `q` single-output likelihoods of the rows of `T Y`.
pub fn projected_mll<T: Scalar>(
    data: &Dataset<T>,
    params: &NoiseParametrization<T>,
    kernels: &LatentKernelSet<T>,
) -> Result<T> {
    check_params(data, params, kernels)?;
    let (p, n, q) = (data.n_tasks(), data.n_points(), kernels.len());
    let nn = T::count(n);
    let w = params.l().transpose() * params.mixing().qperp().transpose() * &data.y;
    let corrective = T::count((p - q) * n) * T::ln_2pi()
        + (nn + nn) * params.log_abs_det_r()
        + nn * params.log_det_b_tilde()
        + w.norm_squared();
    Ok(log_latent(data, params, kernels)? - T::lit(0.5) * corrective)
}

/// Alternate decoupled likelihood written with `Σ⁻¹` directly; must agree
/// with [`projected_mll`].
pub fn raw_mll<T: Scalar>(
    data: &Dataset<T>,
    params: &NoiseParametrization<T>,
    kernels: &LatentKernelSet<T>,
) -> Result<T> {
    check_params(data, params, kernels)?;
    let (p, n) = (data.n_tasks(), data.n_points());
    let prec = build_sigma_inverse(params)?;
    let h = params.h();
    let kmats = kernels.train_matrices(&data.x)?;
    let factors = latent_factors(&kmats, params.sigma_p())?;
    let y = &data.y;
    let quad = (y.transpose() * &prec).component_mul(&y.transpose()).sum();
    let v = y.transpose() * &prec * &h;
    let mut total = quad;
    for (i, f) in factors.iter().enumerate() {
        let s2 = params.sigma_p()[i];
        let vi = v.column(i).into_owned();
        // (K⁻¹ + σ⁻² I)⁻¹ = σ² I − σ⁴ (K + σ² I)⁻¹
        let inner = s2 * vi.norm_squared() - s2 * s2 * vi.dot(&f.solve_vec(&vi));
        total += f.log_det() - inner;
    }
    let nn = T::count(n);
    total += (nn + nn) * params.log_abs_det_r()
        + nn * params.log_det_b_tilde()
        + T::count(n * p) * T::ln_2pi();
    Ok(-T::lit(0.5) * total)
}

/// `log Π_j N(Y_j | 0, Σ) / N(T Y_j | 0, Σ_P)` and `Σ_i log N(T_i Y | 0,
/// K_i + σ_i² I)`, evaluated densely. Their sum is `log p(Y)`.
pub fn likelihood_decomposition_check<T: Scalar>(
    data: &Dataset<T>,
    params: &NoiseParametrization<T>,
    kernels: &LatentKernelSet<T>,
) -> Result<LikelihoodDecomposition<T>> {
    check_params(data, params, kernels)?;
    let sigma = build_sigma(params)?;
    let sigma_factor = cholesky_escalating(sigma, T::one(), "Sigma")?;
    let sp = DMatrix::from_diagonal(params.sigma_p());
    let sp_factor = cholesky_escalating(sp, T::one(), "Sigma_P")?;
    let z = compute_t(params) * &data.y;
    let mut log_corrective = T::zero();
    for j in 0..data.n_points() {
        log_corrective += gaussian_log_density(&sigma_factor, &data.y.column(j).into_owned())
            - gaussian_log_density(&sp_factor, &z.column(j).into_owned());
    }
    Ok(LikelihoodDecomposition {
        log_corrective,
        log_latent: log_latent(data, params, kernels)?,
    })
}
