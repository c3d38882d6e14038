//! Model variants and their unconstrained parameter vectors.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, invalid, LmcError, Result};
use crate::inference::{
    decoupled_posterior, naive_mll, naive_posterior, projected_mll, CovarianceMode, Dataset,
    PredictionResult,
};
use crate::kernels::{LatentKernelSet, Matern52Kernel};
use crate::linalg::{expm, orthonormal_complement, qr_positive, symmetrize};
use crate::noise_param::{build_sigma, MixingQR, NoiseParametrization, StructureFlags};
use crate::scalar::Scalar;

/// Model variants compared in the benchmark.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Unconstrained dense noise, trained on the dense likelihood.
    Exact,
    Proj,
    #[serde(rename = "diagproj")]
    DiagProj,
    Bdn,
    BdnDiag,
    Oilmm,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Exact,
        Variant::Proj,
        Variant::DiagProj,
        Variant::Bdn,
        Variant::BdnDiag,
        Variant::Oilmm,
    ];

    pub fn tag(self) -> &'static str {
        match self {
            Variant::Exact => "exact",
            Variant::Proj => "proj",
            Variant::DiagProj => "diagproj",
            Variant::Bdn => "bdn",
            Variant::BdnDiag => "bdn_diag",
            Variant::Oilmm => "oilmm",
        }
    }

    /// Structure flags of the projected variants; `None` for `Exact`.
    pub fn flags(self) -> Option<StructureFlags> {
        let f = |bdn, diag_b, oilmm| Some(StructureFlags { bdn, diag_b, oilmm });
        match self {
            Variant::Exact => None,
            Variant::Proj => f(false, false, false),
            Variant::DiagProj => f(false, true, false),
            Variant::Bdn => f(true, false, false),
            Variant::BdnDiag => f(true, true, false),
            Variant::Oilmm => f(false, false, true),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Variant {
    type Err = LmcError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| LmcError::InvalidInput(format!("unknown model variant '{s}'")))
    }
}

/// Strictly lower pairs `(a, b)`, `a > b`, in parameter order.
pub(crate) fn lower_pairs(p: usize) -> impl Iterator<Item = (usize, usize)> {
    (1..p).flat_map(|a| (0..a).map(move |b| (a, b)))
}

/// Decoded parameters of a projected variant.
pub(crate) struct ProjectedState<T: Scalar> {
    pub kernels: LatentKernelSet<T>,
    pub generator: DMatrix<T>,
    pub params: NoiseParametrization<T>,
}

/// Decoded parameters of the exact variant.
pub(crate) struct ExactState<T: Scalar> {
    pub kernels: LatentKernelSet<T>,
    pub h: DMatrix<T>,
    /// Lower Cholesky factor of `Σ`.
    pub sigma_chol: DMatrix<T>,
}

impl<T: Scalar> ExactState<T> {
    pub fn sigma(&self) -> DMatrix<T> {
        let mut s = &self.sigma_chol * self.sigma_chol.transpose();
        symmetrize(&mut s);
        s
    }
}

/// An LMC model stored as an unconstrained parameter vector.
///
/// Projected variants store `Q₊ = basis · exp(S)` with a fixed orthonormal
/// `basis` and a trainable skew-symmetric generator `S`.
#[derive(Debug, Clone, PartialEq)]
pub struct LmcModel<T: Scalar> {
    variant: Variant,
    n_tasks: usize,
    n_latent: usize,
    output_scales: Vec<T>,
    basis: DMatrix<T>,
    theta: DVector<T>,
}

struct Cursor<'a, T> {
    theta: &'a [T],
    pos: usize,
}

impl<'a, T: Scalar> Cursor<'a, T> {
    fn take(&mut self, k: usize) -> &'a [T] {
        let s = &self.theta[self.pos..self.pos + k];
        self.pos += k;
        s
    }
}

impl<T: Scalar> LmcModel<T> {
    /// Number of unconstrained parameters of a variant.
    pub fn parameter_count(variant: Variant, p: usize, q: usize) -> usize {
        let tri = |k: usize| k * k.saturating_sub(1) / 2;
        match variant.flags() {
            None => q + p * q + p + tri(p),
            Some(f) => {
                let r = if f.oilmm { q } else { q + tri(q) };
                let m = if f.bdn || f.oilmm { 0 } else { q * (p - q) };
                let l = if f.oilmm {
                    usize::from(p > q)
                } else if f.diag_b {
                    p - q
                } else {
                    p - q + tri(p - q)
                };
                q + tri(p) + r + q + m + l
            }
        }
    }

    /// Builds a projected-variant model whose generator starts at zero.
    pub fn from_projected(
        variant: Variant,
        kernels: &LatentKernelSet<T>,
        params: &NoiseParametrization<T>,
    ) -> Result<Self> {
        let flags = variant
            .flags()
            .ok_or_else(|| LmcError::InvalidInput("exact variant has no projected parameters".into()))?;
        let (p, q) = (params.n_tasks(), params.n_latent());
        check_dims("kernels vs parametrization", (q, q), (kernels.len(), q))?;
        // re-validate under the variant's flags
        let params = NoiseParametrization::new(
            params.mixing().clone(),
            params.sigma_p().clone(),
            params.m().clone(),
            params.l().clone(),
            flags,
        )?;
        let r = params.mixing().r();
        if (0..q).any(|i| r[(i, i)] <= T::zero()) {
            return invalid("R must have a positive diagonal");
        }
        let mut theta = Vec::with_capacity(Self::parameter_count(variant, p, q));
        theta.extend(kernels.iter().map(|k| k.lengthscale().ln()));
        theta.extend(lower_pairs(p).map(|_| T::zero()));
        theta.extend((0..q).map(|i| r[(i, i)].ln()));
        if !flags.oilmm {
            for j in 0..q {
                for i in 0..j {
                    theta.push(r[(i, j)]);
                }
            }
        }
        theta.extend(params.sigma_p().iter().map(|s| s.ln()));
        if !(flags.bdn || flags.oilmm) {
            for a in 0..q {
                for b in 0..(p - q) {
                    theta.push(params.m()[(a, b)]);
                }
            }
        }
        let l = params.l();
        if flags.oilmm {
            if p > q {
                theta.push(l[(0, 0)].ln());
            }
        } else {
            theta.extend((0..(p - q)).map(|j| l[(j, j)].ln()));
            if !flags.diag_b {
                theta.extend(lower_pairs(p - q).map(|(a, b)| l[(a, b)]));
            }
        }
        Ok(Self {
            variant,
            n_tasks: p,
            n_latent: q,
            output_scales: kernels.iter().map(|k| k.output_scale()).collect(),
            basis: params.mixing().q_plus(),
            theta: DVector::from_vec(theta),
        })
    }

    /// Builds an exact-variant model from `H` and a dense SPD `Σ`.
    pub fn from_exact(kernels: &LatentKernelSet<T>, h: &DMatrix<T>, sigma: &DMatrix<T>) -> Result<Self> {
        let (p, q) = h.shape();
        check_dims("H", (p, kernels.len()), h.shape())?;
        check_dims("Sigma", (p, p), sigma.shape())?;
        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| LmcError::InvalidInput("Sigma must be positive definite".into()))?
            .l();
        let mut theta = Vec::with_capacity(Self::parameter_count(Variant::Exact, p, q));
        theta.extend(kernels.iter().map(|k| k.lengthscale().ln()));
        for a in 0..p {
            for i in 0..q {
                theta.push(h[(a, i)]);
            }
        }
        theta.extend((0..p).map(|j| chol[(j, j)].ln()));
        theta.extend(lower_pairs(p).map(|(a, b)| chol[(a, b)]));
        Ok(Self {
            variant: Variant::Exact,
            n_tasks: p,
            n_latent: q,
            output_scales: kernels.iter().map(|k| k.output_scale()).collect(),
            basis: DMatrix::zeros(0, 0),
            theta: DVector::from_vec(theta),
        })
    }

    /// Restores a model from its raw parts, as stored in a checkpoint.
    pub fn from_raw(
        variant: Variant,
        n_tasks: usize,
        n_latent: usize,
        output_scales: Vec<T>,
        basis: DMatrix<T>,
        theta: DVector<T>,
    ) -> Result<Self> {
        if n_latent == 0 || n_latent > n_tasks {
            return invalid("need 1 <= q <= p");
        }
        let expected = Self::parameter_count(variant, n_tasks, n_latent);
        if theta.len() != expected {
            return Err(LmcError::DimensionMismatch {
                context: format!("{variant} parameter vector"),
                expected: expected.to_string(),
                actual: theta.len().to_string(),
            });
        }
        if output_scales.len() != n_latent {
            return invalid("one output scale per latent process is required");
        }
        if variant == Variant::Exact {
            check_dims("basis", (0, 0), basis.shape())?;
        } else {
            check_dims("basis", (n_tasks, n_tasks), basis.shape())?;
            let err = (basis.transpose() * &basis - DMatrix::identity(n_tasks, n_tasks)).norm();
            if err > T::lit(1e-8) {
                return invalid("basis is not orthonormal");
            }
        }
        let model = Self {
            variant,
            n_tasks,
            n_latent,
            output_scales,
            basis,
            theta,
        };
        model.kernels()?;
        Ok(model)
    }

    /// SVD-based starting point for `variant` with `q` latent processes.
    pub fn initialize(variant: Variant, data: &Dataset<T>, q: usize, seed: u64) -> Result<Self> {
        let init = init_from_svd(data, q, seed)?;
        let kernels = LatentKernelSet::from_lengthscales(&vec![T::one(); q])?;
        let p = data.n_tasks();
        match variant.flags() {
            None => {
                let sigma = DMatrix::identity(p, p) * T::lit(0.01);
                Self::from_exact(&kernels, &init.h0, &sigma)
            }
            Some(flags) => {
                let mixing = MixingQR::from_q_plus(&init.q_plus, DMatrix::from_diagonal(&init.singular_values))?;
                let params = NoiseParametrization::new(
                    mixing,
                    DVector::from_element(q, T::lit(0.01)),
                    DMatrix::zeros(q, p - q),
                    DMatrix::identity(p - q, p - q) * T::lit(10.0),
                    flags,
                )?;
                Self::from_projected(variant, &kernels, &params)
            }
        }
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    pub fn n_latent(&self) -> usize {
        self.n_latent
    }

    pub fn output_scales(&self) -> &[T] {
        &self.output_scales
    }

    pub fn basis(&self) -> &DMatrix<T> {
        &self.basis
    }

    pub fn theta(&self) -> &DVector<T> {
        &self.theta
    }

    pub fn set_theta(&mut self, theta: DVector<T>) -> Result<()> {
        check_dims("theta", (self.theta.len(), 1), theta.shape())?;
        self.theta = theta;
        Ok(())
    }

    /// Which coordinates receive decoupled weight decay: kernel and noise
    /// parameters, not the generator, `R` or `H`.
    pub fn weight_decay_mask(&self) -> Vec<bool> {
        let (p, q) = (self.n_tasks, self.n_latent);
        let tri = |k: usize| k * k.saturating_sub(1) / 2;
        let mut mask = vec![true; q];
        match self.variant.flags() {
            None => {
                mask.extend(std::iter::repeat_n(false, p * q));
                mask.extend(std::iter::repeat_n(true, p + tri(p)));
            }
            Some(f) => {
                let r = if f.oilmm { q } else { q + tri(q) };
                mask.extend(std::iter::repeat_n(false, tri(p) + r));
                let rest = Self::parameter_count(self.variant, p, q) - mask.len();
                mask.extend(std::iter::repeat_n(true, rest));
            }
        }
        mask
    }

    pub fn kernels(&self) -> Result<LatentKernelSet<T>> {
        let q = self.n_latent;
        let ks = (0..q)
            .map(|i| Matern52Kernel::new(self.theta[i].exp(), self.output_scales[i]))
            .collect::<Result<Vec<_>>>()?;
        LatentKernelSet::new(ks)
    }

    pub(crate) fn projected_state(&self) -> Result<ProjectedState<T>> {
        let flags = self
            .variant
            .flags()
            .ok_or_else(|| LmcError::InvalidInput("exact variant has no projected state".into()))?;
        let (p, q) = (self.n_tasks, self.n_latent);
        let kernels = self.kernels()?;
        let mut c = Cursor {
            theta: self.theta.as_slice(),
            pos: q,
        };
        let mut generator = DMatrix::zeros(p, p);
        for ((a, b), &s) in lower_pairs(p).zip(c.take(p * (p - 1) / 2)) {
            generator[(a, b)] = s;
            generator[(b, a)] = -s;
        }
        let q_plus = &self.basis * expm(&generator);
        let mut r = DMatrix::zeros(q, q);
        for (i, v) in c.take(q).iter().enumerate() {
            r[(i, i)] = v.exp();
        }
        if !flags.oilmm {
            for j in 0..q {
                for i in 0..j {
                    r[(i, j)] = c.take(1)[0];
                }
            }
        }
        let sigma_p = DVector::from_iterator(q, c.take(q).iter().map(|v| v.exp()));
        let mut m = DMatrix::zeros(q, p - q);
        if !(flags.bdn || flags.oilmm) {
            for a in 0..q {
                for b in 0..(p - q) {
                    m[(a, b)] = c.take(1)[0];
                }
            }
        }
        let mut l = DMatrix::zeros(p - q, p - q);
        if flags.oilmm {
            if p > q {
                let lambda = c.take(1)[0].exp();
                l.fill_diagonal(lambda);
            }
        } else {
            for (j, v) in c.take(p - q).iter().enumerate() {
                l[(j, j)] = v.exp();
            }
            if !flags.diag_b {
                for ((a, b), &v) in lower_pairs(p - q).zip(c.take((p - q) * (p - q).saturating_sub(1) / 2)) {
                    l[(a, b)] = v;
                }
            }
        }
        debug_assert_eq!(c.pos, self.theta.len());
        let mixing = MixingQR::from_q_plus(&q_plus, r)?;
        let params = NoiseParametrization::new(mixing, sigma_p, m, l, flags)?;
        Ok(ProjectedState {
            kernels,
            generator,
            params,
        })
    }

    pub(crate) fn exact_state(&self) -> Result<ExactState<T>> {
        if self.variant != Variant::Exact {
            return invalid("not an exact-variant model");
        }
        let (p, q) = (self.n_tasks, self.n_latent);
        let kernels = self.kernels()?;
        let mut c = Cursor {
            theta: self.theta.as_slice(),
            pos: q,
        };
        let hv = c.take(p * q);
        let h = DMatrix::from_fn(p, q, |a, i| hv[a * q + i]);
        let mut sigma_chol = DMatrix::zeros(p, p);
        for (j, v) in c.take(p).iter().enumerate() {
            sigma_chol[(j, j)] = v.exp();
        }
        for ((a, b), &v) in lower_pairs(p).zip(c.take(p * (p - 1) / 2)) {
            sigma_chol[(a, b)] = v;
        }
        Ok(ExactState {
            kernels,
            h,
            sigma_chol,
        })
    }

    /// Noise parametrization of a projected variant; `None` for `Exact`.
    pub fn noise_parametrization(&self) -> Result<Option<NoiseParametrization<T>>> {
        if self.variant == Variant::Exact {
            return Ok(None);
        }
        Ok(Some(self.projected_state()?.params))
    }

    pub fn h(&self) -> Result<DMatrix<T>> {
        match self.variant {
            Variant::Exact => Ok(self.exact_state()?.h),
            _ => Ok(self.projected_state()?.params.h()),
        }
    }

    pub fn sigma(&self) -> Result<DMatrix<T>> {
        match self.variant {
            Variant::Exact => Ok(self.exact_state()?.sigma()),
            _ => build_sigma(&self.projected_state()?.params),
        }
    }

    /// `log p(Y)` under the variant's own likelihood path.
    pub fn log_likelihood(&self, data: &Dataset<T>) -> Result<T> {
        match self.variant {
            Variant::Exact => {
                let s = self.exact_state()?;
                naive_mll(data, &s.h, &s.sigma(), &s.kernels)
            }
            _ => {
                let s = self.projected_state()?;
                projected_mll(data, &s.params, &s.kernels)
            }
        }
    }

    pub fn predict(
        &self,
        data: &Dataset<T>,
        xstar: &DMatrix<T>,
        mode: CovarianceMode,
    ) -> Result<PredictionResult<T>> {
        match self.variant {
            Variant::Exact => {
                let s = self.exact_state()?;
                naive_posterior(data, &s.h, &s.sigma(), &s.kernels, xstar, mode)
            }
            _ => {
                let s = self.projected_state()?;
                decoupled_posterior(data, &s.params, &s.kernels, xstar, mode)
            }
        }
    }
}

/// Truncated-SVD starting point.
#[derive(Debug, Clone)]
pub struct SvdInit<T: Scalar> {
    /// `U_q · S_q`
    pub h0: DMatrix<T>,
    pub singular_values: DVector<T>,
    /// `[U_q | complement]`, orthonormal.
    pub q_plus: DMatrix<T>,
    /// True when `Y` had rank below `q` and random directions were added.
    pub padded: bool,
}

/// `H0 = U_q S_q` from the rank-`q` truncated SVD of `Y`. Missing
/// directions (rank below `q`) are filled with random orthonormal columns
/// and singular value `1e-6`.
pub fn init_from_svd<T: Scalar>(data: &Dataset<T>, q: usize, seed: u64) -> Result<SvdInit<T>> {
    let (p, n) = (data.n_tasks(), data.n_points());
    if q == 0 || q > p.min(n) {
        return invalid(format!("need 1 <= q <= min(p, n) = {}, got {q}", p.min(n)));
    }
    let svd = data.y.clone().svd(true, false);
    let u = svd
        .u
        .ok_or_else(|| LmcError::InvalidInput("SVD failed to produce U".into()))?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| {
        svd.singular_values[b]
            .partial_cmp(&svd.singular_values[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let top = svd.singular_values[order[0]];
    let floor = T::lit(1e-12) * top;
    let kept: Vec<usize> = order
        .iter()
        .copied()
        .take(q)
        .filter(|&k| svd.singular_values[k] > floor && svd.singular_values[k] > T::zero())
        .collect();
    let padded = kept.len() < q;
    let mut cols = DMatrix::zeros(p, q);
    let mut s = DVector::from_element(q, T::lit(1e-6));
    for (c, &k) in kept.iter().enumerate() {
        cols.set_column(c, &u.column(k));
        s[c] = svd.singular_values[k];
    }
    if padded {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in kept.len()..q {
            for a in 0..p {
                let z: f64 = StandardNormal.sample(&mut rng);
                cols[(a, c)] = T::lit(z);
            }
        }
        let (qm, _) = qr_positive(&cols)?;
        cols = qm;
        log::info!("init_from_svd: rank {} < q = {q}, padded with random directions", kept.len());
    }
    let mut q_plus = DMatrix::zeros(p, p);
    q_plus.columns_mut(0, q).copy_from(&cols);
    q_plus
        .columns_mut(q, p - q)
        .copy_from(&orthonormal_complement(&cols));
    Ok(SvdInit {
        h0: &cols * DMatrix::from_diagonal(&s),
        singular_values: s,
        q_plus,
        padded,
    })
}
