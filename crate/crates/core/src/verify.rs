//! Random model instances and the oracle-equivalence suite: every fast
//! path is compared against its dense counterpart.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::inference::{
    decoupled_posterior, likelihood_decomposition_check, naive_mll, naive_posterior,
    posterior_u, posterior_u_dense, projected_mll, raw_mll, CovarianceMode, Dataset,
};
use crate::kernels::{LatentKernelSet, Matern52Kernel};
use crate::noise_param::{
    build_sigma, check_dpn, compute_t, project_noise, MixingQR, NoiseParametrization,
    StructureFlags,
};
use crate::scalar::Scalar;

/// A random dataset with a random noise parametrization.
#[derive(Debug, Clone)]
pub struct RandomInstance<T: Scalar> {
    pub data: Dataset<T>,
    pub kernels: LatentKernelSet<T>,
    pub params: NoiseParametrization<T>,
    pub xstar: DMatrix<T>,
}

pub fn normal_matrix<T: Scalar, R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<T> {
    DMatrix::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z)
    })
}

/// Random parametrization with the given structure.
pub fn random_params<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    p: usize,
    q: usize,
    flags: StructureFlags,
) -> Result<NoiseParametrization<T>> {
    let mut h: DMatrix<T> = normal_matrix(rng, p, q);
    if flags.oilmm {
        // orthogonal columns give a diagonal R
        let (qm, _) = crate::linalg::qr_positive(&h)?;
        let scales = DVector::from_fn(q, |_, _| T::lit(rng.random_range(0.5..2.0)));
        h = qm * DMatrix::from_diagonal(&scales);
    }
    let mut mixing = MixingQR::from_h(&h)?;
    if flags.oilmm {
        let r = DMatrix::from_diagonal(&mixing.r().diagonal());
        mixing = MixingQR::new(mixing.q().clone(), r, mixing.qperp().clone())?;
    }
    let sigma_p = DVector::from_fn(q, |_, _| T::lit(rng.random_range(0.05..0.5)));
    let m = if flags.bdn || flags.oilmm {
        DMatrix::zeros(q, p - q)
    } else {
        normal_matrix::<T, _>(rng, q, p - q) * T::lit(0.5)
    };
    let k = p - q;
    let mut l = DMatrix::zeros(k, k);
    if flags.oilmm {
        let lambda = T::lit(rng.random_range(0.5..1.5));
        l.fill_diagonal(lambda);
    } else {
        for j in 0..k {
            l[(j, j)] = T::lit(rng.random_range(0.5..1.5));
            if !flags.diag_b {
                for i in (j + 1)..k {
                    let z: f64 = StandardNormal.sample(rng);
                    l[(i, j)] = T::lit(0.3 * z);
                }
            }
        }
    }
    NoiseParametrization::new(mixing, sigma_p, m, l, flags)
}

/// Random instance with `n` training points and `m` test points in one
/// input dimension.
pub fn random_instance<T: Scalar>(
    seed: u64,
    n: usize,
    p: usize,
    q: usize,
    m: usize,
    flags: StructureFlags,
) -> Result<RandomInstance<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(1, n, |_, _| T::lit(rng.random_range(-1.0..1.0)));
    let xstar = DMatrix::from_fn(1, m, |_, _| T::lit(rng.random_range(-1.2..1.2)));
    let y = normal_matrix(&mut rng, p, n);
    let kernels = LatentKernelSet::new(
        (0..q)
            .map(|_| {
                Matern52Kernel::new(
                    T::lit(rng.random_range(0.2..1.0)),
                    T::lit(rng.random_range(0.5..2.0)),
                )
            })
            .collect::<Result<Vec<_>>>()?,
    )?;
    let params = random_params(&mut rng, p, q, flags)?;
    Ok(RandomInstance {
        data: Dataset::new(x, y)?,
        kernels,
        params,
        xstar,
    })
}

/// Random shape with `n <= 20`, `p <= 6`, `q <= 3`.
pub fn random_shape(seed: u64) -> (usize, usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_5a9e);
    let p = rng.random_range(1..=6);
    let q = rng.random_range(1..=p.min(3));
    let n = rng.random_range(2..=20);
    (n, p, q)
}

/// `‖a - b‖_∞ / max(‖b‖_∞, floor)`.
pub fn relative_error<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> f64 {
    let scale = b.amax().to_f64_lossy().max(1e-300);
    (a - b).amax().to_f64_lossy() / scale
}

pub fn relative_scalar_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Outcome of one identity over all instances.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityCheck {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
}

impl IdentityCheck {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tolerance
    }
}

struct Tally(Vec<IdentityCheck>);

impl Tally {
    fn record(&mut self, name: &'static str, tolerance: f64, err: f64) {
        let err = if err.is_nan() { f64::INFINITY } else { err };
        match self.0.iter_mut().find(|c| c.name == name) {
            Some(c) => c.max_error = c.max_error.max(err),
            None => self.0.push(IdentityCheck {
                name,
                max_error: err,
                tolerance,
            }),
        }
    }
}

/// Runs every dense-versus-decoupled identity on `count` random instances.
pub fn run_identity_suite(count: usize, seed: u64) -> Result<Vec<IdentityCheck>> {
    let mut tally = Tally(Vec::new());
    for k in 0..count {
        let s = seed.wrapping_add(k as u64);
        let (n, p, q) = random_shape(s);
        let inst = random_instance::<f64>(s, n, p, q, 7, StructureFlags::default())?;
        let (data, kernels, params) = (&inst.data, &inst.kernels, &inst.params);
        let h = params.h();
        let sigma = build_sigma(params)?;

        let fast = decoupled_posterior(data, params, kernels, &inst.xstar, CovarianceMode::Full)?;
        let slow = naive_posterior(data, &h, &sigma, kernels, &inst.xstar, CovarianceMode::Full)?;
        tally.record("posterior mean", 1e-8, relative_error(&fast.mean, &slow.mean));
        tally.record("posterior variance", 1e-8, relative_error(&fast.task_var, &slow.task_var));
        let cov_err = fast
            .task_cov
            .as_ref()
            .zip(slow.task_cov.as_ref())
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| relative_error(x, y)).fold(0.0, f64::max))
            .unwrap_or(f64::INFINITY);
        tally.record("posterior covariance", 1e-8, cov_err);

        let proj = projected_mll(data, params, kernels)?;
        let raw = raw_mll(data, params, kernels)?;
        let naive = naive_mll(data, &h, &sigma, kernels)?;
        tally.record("projected_mll = naive_mll", 1e-8, relative_scalar_error(proj, naive));
        tally.record("raw_mll = naive_mll", 1e-8, relative_scalar_error(raw, naive));
        let dec = likelihood_decomposition_check(data, params, kernels)?;
        tally.record(
            "corrective + latent = projected_mll",
            1e-8,
            relative_scalar_error(dec.log_corrective + dec.log_latent, proj),
        );

        let t = compute_t(params);
        tally.record(
            "T H = I",
            1e-10,
            (&t * &h - DMatrix::identity(q, q)).amax(),
        );
        tally.record(
            "T Sigma T' = Sigma_P",
            1e-10,
            (&t * &sigma * t.transpose() - DMatrix::from_diagonal(params.sigma_p())).amax(),
        );
        tally.record(
            "DPN check accepts parametrized noise",
            0.0,
            if check_dpn(&h, &sigma, 1e-8)?.is_dpn { 0.0 } else { 1.0 },
        );

        let lat = posterior_u(data, params, kernels)?;
        let dense = posterior_u_dense(data, &h, &sigma, kernels)?;
        let mut mean_err: f64 = 0.0;
        let mut cov_err: f64 = 0.0;
        let scale = dense.cov.amax();
        for i in 0..q {
            for j in 0..n {
                mean_err = mean_err.max((lat.mean[(i, j)] - dense.mean[i * n + j]).abs());
            }
            for i2 in 0..q {
                let block = dense.cov.view((i * n, i2 * n), (n, n));
                let e = if i == i2 {
                    (&lat.cov[i] - block).amax()
                } else {
                    block.amax()
                };
                cov_err = cov_err.max(e / scale);
            }
        }
        tally.record(
            "latent posterior mean",
            1e-8,
            mean_err / dense.mean.amax().max(1e-300),
        );
        tally.record("latent posterior covariance block-diagonal", 1e-9, cov_err);

        let proj_noise = project_noise(&sigma, params.mixing())?;
        tally.record(
            "noise projection of DPN noise is exact",
            1e-8,
            proj_noise.distance / sigma.norm().max(1.0),
        );
    }
    Ok(tally.0)
}
