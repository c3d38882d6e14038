//! Joint parametrization of the mixing matrix `H` and noise covariance `Σ`
//! that keeps `HᵀΣ⁻¹H` diagonal.
//!
//! `H = QR` with `Q` column-orthonormal and `R` upper triangular; `Q⊥`
//! completes `Q` to an orthonormal basis `Q₊ = [Q | Q⊥]`. In that basis
//!
//! ```text
//! Σ⁻¹ = Q₊ R₊⁻ᵀ [[Σ_P⁻¹, M], [Mᵀ, B]] R₊⁻¹ Q₊ᵀ,   R₊ = diag(R, I)
//! Σ   = Q₊ R₊   [[D̃,    M̃], [M̃ᵀ, B̃]] R₊ᵀ  Q₊ᵀ
//! ```
//!
//! with `B̃⁻¹ = L Lᵀ`, `B = B̃⁻¹ + Mᵀ Σ_P M`, `M̃ = -Σ_P M B̃` and
//! `D̃ = Σ_P + Σ_P M B̃ Mᵀ Σ_P`. The free parameters are `(Q₊, R, Σ_P, M, L)`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, invalid, LmcError, Result};
use crate::linalg::{
    cholesky_escalating, expm, lower_triangular_inverse, max_abs, max_asymmetry, qr_positive,
    orthonormal_complement, symmetrize, upper_triangular_inverse,
};
use crate::scalar::Scalar;

/// Default relative tolerance of [`check_dpn`].
pub const DPN_TOL: f64 = 1e-8;
/// Floor applied to non-positive entries of the projected precision in
/// [`project_noise`].
pub const PROJECTION_CLAMP: f64 = 1e-10;

fn orthonormality_tol<T: Scalar>() -> T {
    T::lit(1e-10).max(T::default_epsilon() * T::lit(1e4))
}

fn symmetry_tol<T: Scalar>() -> T {
    T::lit(1e-8).max(T::default_epsilon() * T::lit(1e4))
}

/// QR split of the mixing matrix together with an orthonormal complement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingQR<T: Scalar> {
    q: DMatrix<T>,
    r: DMatrix<T>,
    qperp: DMatrix<T>,
}

impl<T: Scalar> MixingQR<T> {
    /// Validates shapes, orthonormality and the triangular structure of `r`.
    pub fn new(q: DMatrix<T>, r: DMatrix<T>, qperp: DMatrix<T>) -> Result<Self> {
        let (p, k) = q.shape();
        if k == 0 || k > p {
            return invalid(format!("Q must be p x q with 1 <= q <= p, got {p}x{k}"));
        }
        check_dims("R", (k, k), r.shape())?;
        check_dims("Qperp", (p, p - k), qperp.shape())?;
        let tol = orthonormality_tol::<T>();
        let gram = q.transpose() * &q - DMatrix::identity(k, k);
        if gram.norm() > tol {
            return invalid(format!("Q is not column-orthonormal (error {})", gram.norm()));
        }
        if p > k {
            let gram = qperp.transpose() * &qperp - DMatrix::identity(p - k, p - k);
            if gram.norm() > tol {
                return invalid(format!("Qperp is not orthonormal (error {})", gram.norm()));
            }
            let cross = q.transpose() * &qperp;
            if cross.norm() > tol {
                return invalid(format!("Qperp is not orthogonal to Q (error {})", cross.norm()));
            }
        }
        for j in 0..k {
            for i in (j + 1)..k {
                if r[(i, j)] != T::zero() {
                    return invalid("R must be upper triangular");
                }
            }
            if r[(j, j)] == T::zero() || !r[(j, j)].finite() {
                return invalid("R must have a nonzero finite diagonal");
            }
        }
        Ok(Self { q, r, qperp })
    }

    /// QR split of `h` with `diag(R) > 0` and an arbitrary complement.
    pub fn from_h(h: &DMatrix<T>) -> Result<Self> {
        let (q, r) = qr_positive(h)?;
        let qperp = orthonormal_complement(&q);
        Self::new(q, r, qperp)
    }

    /// Splits a `p x p` orthonormal matrix into `[Q | Q⊥]` after its first
    /// `r.nrows()` columns.
    pub fn from_q_plus(q_plus: &DMatrix<T>, r: DMatrix<T>) -> Result<Self> {
        let p = q_plus.nrows();
        let k = r.nrows();
        check_dims("Q+", (p, p), q_plus.shape())?;
        if k > p {
            return invalid("R larger than Q+");
        }
        Self::new(
            q_plus.columns(0, k).into_owned(),
            r,
            q_plus.columns(k, p - k).into_owned(),
        )
    }

    pub fn q(&self) -> &DMatrix<T> {
        &self.q
    }

    pub fn r(&self) -> &DMatrix<T> {
        &self.r
    }

    pub fn qperp(&self) -> &DMatrix<T> {
        &self.qperp
    }

    /// Number of tasks `p`.
    pub fn n_tasks(&self) -> usize {
        self.q.nrows()
    }

    /// Number of latent processes `q`.
    pub fn n_latent(&self) -> usize {
        self.q.ncols()
    }

    pub fn h(&self) -> DMatrix<T> {
        &self.q * &self.r
    }

    pub fn q_plus(&self) -> DMatrix<T> {
        let (p, k) = self.q.shape();
        let mut out = DMatrix::zeros(p, p);
        out.columns_mut(0, k).copy_from(&self.q);
        out.columns_mut(k, p - k).copy_from(&self.qperp);
        out
    }

    pub fn r_inv(&self) -> DMatrix<T> {
        upper_triangular_inverse(&self.r)
    }

    /// Replaces the orthogonal complement (any orthonormal basis of the same
    /// subspace is accepted).
    pub fn with_qperp(&self, qperp: DMatrix<T>) -> Result<Self> {
        Self::new(self.q.clone(), self.r.clone(), qperp)
    }
}

/// Structural restrictions of the projected model variants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureFlags {
    /// Block-diagonal noise: `M = 0`.
    pub bdn: bool,
    /// Diagonal `B̃`: `L` diagonal.
    pub diag_b: bool,
    /// OILMM restriction: positive diagonal `R`, `M = 0`, `L = λ I`.
    pub oilmm: bool,
}

/// Blocks of a symmetric matrix in the basis `[Q | Q⊥]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SigmaBlocks<T: Scalar> {
    /// `Qᵀ S Q`
    pub a: DMatrix<T>,
    /// `Q⊥ᵀ S Q⊥`
    pub b: DMatrix<T>,
    /// `Qᵀ S Q⊥`
    pub c: DMatrix<T>,
}

impl<T: Scalar> SigmaBlocks<T> {
    /// `Q A Qᵀ + Q⊥ B Q⊥ᵀ + Q C Q⊥ᵀ + Q⊥ Cᵀ Qᵀ`.
    pub fn reassemble(&self, mixing: &MixingQR<T>) -> DMatrix<T> {
        let q = mixing.q();
        let qp = mixing.qperp();
        let cross = q * &self.c * qp.transpose();
        let mut s = q * &self.a * q.transpose() + qp * &self.b * qp.transpose() + &cross
            + cross.transpose();
        symmetrize(&mut s);
        s
    }
}

/// Blocks of `D₊ = R₊⁻¹ Q₊ᵀ Σ Q₊ R₊⁻ᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceBlocks<T: Scalar> {
    pub d_tilde: DMatrix<T>,
    pub m_tilde: DMatrix<T>,
    pub b_tilde: DMatrix<T>,
}

/// The free parameters `(Q₊, R, Σ_P, M, L)` of a noise model satisfying the
/// diagonal-projection condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseParametrization<T: Scalar> {
    mixing: MixingQR<T>,
    sigma_p: DVector<T>,
    m: DMatrix<T>,
    l: DMatrix<T>,
    flags: StructureFlags,
}

impl<T: Scalar> NoiseParametrization<T> {
    pub fn new(
        mixing: MixingQR<T>,
        sigma_p: DVector<T>,
        m: DMatrix<T>,
        l: DMatrix<T>,
        flags: StructureFlags,
    ) -> Result<Self> {
        let p = mixing.n_tasks();
        let k = mixing.n_latent();
        if sigma_p.len() != k {
            return invalid(format!("sigma_p has length {}, expected {k}", sigma_p.len()));
        }
        check_dims("M", (k, p - k), m.shape())?;
        check_dims("L", (p - k, p - k), l.shape())?;
        if !sigma_p.iter().all(|s| s.finite() && *s > T::zero()) {
            return invalid("sigma_p entries must be positive");
        }
        if !m.iter().all(|v| v.finite()) {
            return invalid("M must be finite");
        }
        for j in 0..(p - k) {
            if !(l[(j, j)].finite() && l[(j, j)] > T::zero()) {
                return invalid("L must have a positive diagonal");
            }
            for i in 0..j {
                if l[(i, j)] != T::zero() {
                    return invalid("L must be lower triangular");
                }
            }
            for i in (j + 1)..(p - k) {
                if !l[(i, j)].finite() {
                    return invalid("L must be finite");
                }
            }
        }
        let offdiag_l = (0..(p - k)).any(|j| ((j + 1)..(p - k)).any(|i| l[(i, j)] != T::zero()));
        let m_zero = m.iter().all(|v| *v == T::zero());
        if flags.bdn && !m_zero {
            return invalid("bdn flag requires M = 0");
        }
        if flags.diag_b && offdiag_l {
            return invalid("diag_b flag requires a diagonal L");
        }
        if flags.oilmm {
            let r = mixing.r();
            let r_diag = (0..k).all(|j| (0..k).all(|i| i == j || r[(i, j)] == T::zero()))
                && (0..k).all(|i| r[(i, i)] > T::zero());
            if !r_diag {
                return invalid("oilmm flag requires a positive diagonal R");
            }
            if !m_zero {
                return invalid("oilmm flag requires M = 0");
            }
            let scalar = offdiag_l
                || (1..(p - k)).any(|j| l[(j, j)] != l[(0, 0)]);
            if scalar {
                return invalid("oilmm flag requires L = lambda I");
            }
        }
        Ok(Self {
            mixing,
            sigma_p,
            m,
            l,
            flags,
        })
    }

    /// Recovers the parameters of a noise matrix that already satisfies the
    /// diagonal-projection condition for `h` (relative tolerance `tol`).
    pub fn from_dpn_noise(h: &DMatrix<T>, sigma: &DMatrix<T>, tol: T) -> Result<Self> {
        let mixing = MixingQR::from_h(h)?;
        let check = check_dpn(h, sigma, tol)?;
        if !check.is_dpn {
            return invalid(format!(
                "noise is not diagonally projectable (off-diagonal {} vs diagonal {})",
                check.max_off_diagonal, check.max_diagonal
            ));
        }
        let p = mixing.n_tasks();
        let k = mixing.n_latent();
        let prec = cholesky_escalating(sigma.clone(), T::one(), "Sigma")?.inverse();
        let blocks = decompose_symmetric(&prec, &mixing)?;
        let r = mixing.r().clone();
        let d = r.transpose() * &blocks.a * &r;
        let sigma_p = DVector::from_fn(k, |i, _| T::one() / d[(i, i)]);
        let m = r.transpose() * &blocks.c;
        let sp = DMatrix::from_diagonal(&sigma_p);
        let mut b_tilde_inv = &blocks.b - m.transpose() * &sp * &m;
        symmetrize(&mut b_tilde_inv);
        let l = if p > k {
            b_tilde_inv
                .cholesky()
                .ok_or_else(|| LmcError::IndefiniteNoise("B̃⁻¹ not positive definite".into()))?
                .l()
        } else {
            DMatrix::zeros(0, 0)
        };
        Self::new(mixing, sigma_p, m, l, StructureFlags::default())
    }

    pub fn mixing(&self) -> &MixingQR<T> {
        &self.mixing
    }

    pub fn sigma_p(&self) -> &DVector<T> {
        &self.sigma_p
    }

    pub fn m(&self) -> &DMatrix<T> {
        &self.m
    }

    pub fn l(&self) -> &DMatrix<T> {
        &self.l
    }

    pub fn flags(&self) -> StructureFlags {
        self.flags
    }

    pub fn h(&self) -> DMatrix<T> {
        self.mixing.h()
    }

    pub fn n_tasks(&self) -> usize {
        self.mixing.n_tasks()
    }

    pub fn n_latent(&self) -> usize {
        self.mixing.n_latent()
    }

    /// `B̃⁻¹ = L Lᵀ`.
    pub fn b_tilde_inv(&self) -> DMatrix<T> {
        let mut b = &self.l * self.l.transpose();
        symmetrize(&mut b);
        b
    }

    /// `B̃ = L⁻ᵀ L⁻¹`.
    pub fn b_tilde(&self) -> DMatrix<T> {
        let linv = lower_triangular_inverse(&self.l);
        let mut b = linv.transpose() * linv;
        symmetrize(&mut b);
        b
    }

    /// `ln |det R|`.
    pub fn log_abs_det_r(&self) -> T {
        let r = self.mixing.r();
        (0..r.nrows()).fold(T::zero(), |acc, i| acc + r[(i, i)].magnitude().ln())
    }

    /// `ln |B̃| = -2 Σ ln L_jj`.
    pub fn log_det_b_tilde(&self) -> T {
        let s = (0..self.l.nrows()).fold(T::zero(), |acc, i| acc + self.l[(i, i)].ln());
        -(s + s)
    }

    /// Blocks `(D, M, B)` of `D₊⁻¹`, with `D = Σ_P⁻¹` diagonal.
    pub fn precision_blocks(&self) -> (DMatrix<T>, DMatrix<T>, DMatrix<T>) {
        let d = DMatrix::from_diagonal(&self.sigma_p.map(|s| T::one() / s));
        let sp = DMatrix::from_diagonal(&self.sigma_p);
        let mut b = self.b_tilde_inv() + self.m.transpose() * sp * &self.m;
        symmetrize(&mut b);
        (d, self.m.clone(), b)
    }

    /// Blocks of `D₊` by blockwise (Schur complement) inversion.
    pub fn covariance_blocks(&self) -> CovarianceBlocks<T> {
        let sp = DMatrix::from_diagonal(&self.sigma_p);
        let b_tilde = self.b_tilde();
        let spm = &sp * &self.m;
        let m_tilde = -(&spm * &b_tilde);
        let mut d_tilde = &sp + &spm * &b_tilde * spm.transpose();
        symmetrize(&mut d_tilde);
        CovarianceBlocks {
            d_tilde,
            m_tilde,
            b_tilde,
        }
    }
}

/// Splits a symmetric matrix into its `Q`/`Q⊥` blocks.
pub fn decompose_symmetric<T: Scalar>(s: &DMatrix<T>, mixing: &MixingQR<T>) -> Result<SigmaBlocks<T>> {
    let p = mixing.n_tasks();
    check_dims("decompose_symmetric", (p, p), s.shape())?;
    let scale = max_abs(s).max(T::one());
    if max_asymmetry(s) > symmetry_tol::<T>() * scale {
        return invalid("decompose_symmetric: matrix is not symmetric");
    }
    let q = mixing.q();
    let qp = mixing.qperp();
    let mut a = q.transpose() * s * q;
    let mut b = qp.transpose() * s * qp;
    symmetrize(&mut a);
    symmetrize(&mut b);
    let c = q.transpose() * s * qp;
    Ok(SigmaBlocks { a, b, c })
}

fn assemble_in_basis<T: Scalar>(
    mixing: &MixingQR<T>,
    top_left: &DMatrix<T>,
    top_right: &DMatrix<T>,
    bottom_right: &DMatrix<T>,
) -> DMatrix<T> {
    let p = mixing.n_tasks();
    let k = mixing.n_latent();
    let mut inner = DMatrix::zeros(p, p);
    inner.view_mut((0, 0), (k, k)).copy_from(top_left);
    inner.view_mut((0, k), (k, p - k)).copy_from(top_right);
    inner
        .view_mut((k, 0), (p - k, k))
        .copy_from(&top_right.transpose());
    inner.view_mut((k, k), (p - k, p - k)).copy_from(bottom_right);
    let qp = mixing.q_plus();
    let mut out = &qp * inner * qp.transpose();
    symmetrize(&mut out);
    out
}

/// Noise covariance `Σ = Q₊ R₊ D₊ R₊ᵀ Q₊ᵀ`.
pub fn build_sigma<T: Scalar>(params: &NoiseParametrization<T>) -> Result<DMatrix<T>> {
    let blocks = params.covariance_blocks();
    let k = params.n_latent();
    let p = params.n_tasks();
    // D₊ must be positive definite for Σ to be a covariance.
    let mut d_plus = DMatrix::zeros(p, p);
    d_plus.view_mut((0, 0), (k, k)).copy_from(&blocks.d_tilde);
    d_plus.view_mut((0, k), (k, p - k)).copy_from(&blocks.m_tilde);
    d_plus
        .view_mut((k, 0), (p - k, k))
        .copy_from(&blocks.m_tilde.transpose());
    d_plus.view_mut((k, k), (p - k, p - k)).copy_from(&blocks.b_tilde);
    if d_plus.clone().cholesky().is_none() {
        return Err(LmcError::IndefiniteNoise(
            "blockwise inverse D+ is not positive definite".into(),
        ));
    }
    let r = params.mixing().r();
    let top_left = r * &blocks.d_tilde * r.transpose();
    let top_right = r * &blocks.m_tilde;
    Ok(assemble_in_basis(
        params.mixing(),
        &top_left,
        &top_right,
        &blocks.b_tilde,
    ))
}

/// Noise precision `Σ⁻¹ = Q₊ R₊⁻ᵀ D₊⁻¹ R₊⁻¹ Q₊ᵀ`.
pub fn build_sigma_inverse<T: Scalar>(params: &NoiseParametrization<T>) -> Result<DMatrix<T>> {
    let (d, m, b) = params.precision_blocks();
    let k = params.n_latent();
    let p = params.n_tasks();
    let mut dinv_plus = DMatrix::zeros(p, p);
    dinv_plus.view_mut((0, 0), (k, k)).copy_from(&d);
    dinv_plus.view_mut((0, k), (k, p - k)).copy_from(&m);
    dinv_plus
        .view_mut((k, 0), (p - k, k))
        .copy_from(&m.transpose());
    dinv_plus.view_mut((k, k), (p - k, p - k)).copy_from(&b);
    if dinv_plus.cholesky().is_none() {
        return Err(LmcError::IndefiniteNoise(
            "D+^-1 is not positive definite".into(),
        ));
    }
    let rinv = params.mixing().r_inv();
    let top_left = rinv.transpose() * d * &rinv;
    let top_right = rinv.transpose() * m;
    Ok(assemble_in_basis(params.mixing(), &top_left, &top_right, &b))
}

/// Projection matrix `T = R⁻¹ Qᵀ + Σ_P M Q⊥ᵀ` (`q x p`), a generalized
/// inverse of `H` with `T Σ Tᵀ = Σ_P`.
pub fn compute_t<T: Scalar>(params: &NoiseParametrization<T>) -> DMatrix<T> {
    let mix = params.mixing();
    let sp = DMatrix::from_diagonal(params.sigma_p());
    mix.r_inv() * mix.q().transpose() + sp * params.m() * mix.qperp().transpose()
}

/// Result of [`check_dpn`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpnCheck<T> {
    pub is_dpn: bool,
    pub max_off_diagonal: T,
    pub max_diagonal: T,
}

/// Tests whether `HᵀΣ⁻¹H` is diagonal up to `tol` relative to its largest
/// diagonal entry.
pub fn check_dpn<T: Scalar>(h: &DMatrix<T>, sigma: &DMatrix<T>, tol: T) -> Result<DpnCheck<T>> {
    let p = h.nrows();
    check_dims("check_dpn Sigma", (p, p), sigma.shape())?;
    let chol = sigma.clone().cholesky().ok_or_else(|| {
        LmcError::InvalidInput("check_dpn: Sigma is singular or not positive definite".into())
    })?;
    let proj = h.transpose() * chol.solve(h);
    let k = proj.nrows();
    let mut off = T::zero();
    let mut diag = T::zero();
    for j in 0..k {
        for i in 0..k {
            if i == j {
                diag = diag.max(proj[(i, i)].magnitude());
            } else {
                off = off.max(proj[(i, j)].magnitude());
            }
        }
    }
    Ok(DpnCheck {
        is_dpn: off <= tol * diag,
        max_off_diagonal: off,
        max_diagonal: diag,
    })
}

/// Closest diagonally-projectable precision to a given precision.
#[derive(Debug, Clone)]
pub struct ProjectedNoise<T: Scalar> {
    /// Diagonal of the optimal `D'` (the projected precision `Σ_P⁻¹`).
    pub d_prime: DVector<T>,
    pub sigma_app: DMatrix<T>,
    pub sigma_app_inv: DMatrix<T>,
    /// `‖Σ_opt⁻¹ - Σ_app⁻¹‖_F`.
    pub distance: T,
    /// True when the positivity bound `PROJECTION_CLAMP` is active at the
    /// optimum, i.e. the unconstrained minimizer was not positive.
    pub clamped: bool,
}

/// Unconstrained minimizer over diagonal `D` of `‖A - R⁻ᵀ D R⁻¹‖_F²`:
/// `(P ⊙ P)⁻¹ diag(R⁻¹ A R⁻ᵀ)` with `P = R⁻¹R⁻ᵀ`.
pub fn optimal_projected_precision<T: Scalar>(a: &DMatrix<T>, r: &DMatrix<T>) -> Result<DVector<T>> {
    let (gram, rhs) = projection_system(a, r);
    gram.lu()
        .solve(&rhs)
        .ok_or_else(|| LmcError::InvalidInput("singular Hadamard system in noise projection".into()))
}

fn projection_system<T: Scalar>(a: &DMatrix<T>, r: &DMatrix<T>) -> (DMatrix<T>, DVector<T>) {
    let rinv = upper_triangular_inverse(r);
    let pm = &rinv * rinv.transpose();
    let rhs = (&rinv * a * rinv.transpose()).diagonal();
    (pm.component_mul(&pm), rhs)
}

/// Minimizer of `‖A - R⁻ᵀ D R⁻¹‖_F²` over diagonal `D ≥ floor`, and whether
/// the bound is active. Equals [`optimal_projected_precision`] when that
/// is already above the floor.
pub fn bounded_projected_precision<T: Scalar>(
    a: &DMatrix<T>,
    r: &DMatrix<T>,
    floor: T,
) -> Result<(DVector<T>, bool)> {
    let (gram, rhs) = projection_system(a, r);
    let k = rhs.len();
    // shift to u = v - floor >= 0 and run Lawson-Hanson on the normal equations
    let b = &rhs - &gram * DVector::from_element(k, floor);
    let solve_free = |free: &[usize]| -> Result<DVector<T>> {
        let sub = DMatrix::from_fn(free.len(), free.len(), |i, j| gram[(free[i], free[j])]);
        let rhs = DVector::from_fn(free.len(), |i, _| b[free[i]]);
        let z = sub.lu().solve(&rhs).ok_or_else(|| {
            LmcError::InvalidInput("singular Hadamard system in noise projection".into())
        })?;
        let mut full = DVector::zeros(k);
        for (i, &f) in free.iter().enumerate() {
            full[f] = z[i];
        }
        Ok(full)
    };
    let tol = T::lit(1e-14) * b.amax().max(T::one());
    let mut u = DVector::<T>::zeros(k);
    let mut free: Vec<usize> = Vec::new();
    for _ in 0..(3 * k + 10) {
        let w = &b - &gram * &u;
        let next = (0..k)
            .filter(|j| !free.contains(j))
            .filter(|&j| w[j] > tol)
            .max_by(|&i, &j| w[i].partial_cmp(&w[j]).unwrap_or(std::cmp::Ordering::Equal));
        let Some(j) = next else { break };
        free.push(j);
        loop {
            let z = solve_free(&free)?;
            if free.iter().all(|&f| z[f] > T::zero()) {
                u = z;
                break;
            }
            let mut alpha = T::one();
            for &f in &free {
                if z[f] <= T::zero() {
                    alpha = alpha.min(u[f] / (u[f] - z[f]));
                }
            }
            u = &u + (z - &u) * alpha;
            free.retain(|&f| u[f] > tol);
            for i in 0..k {
                if !free.contains(&i) {
                    u[i] = T::zero();
                }
            }
        }
    }
    let active = u.iter().any(|&x| x <= T::zero());
    Ok((u.add_scalar(floor), active))
}

/// Projects an arbitrary SPD noise onto the set of noises that are
/// diagonally projectable for `mixing`, in Frobenius distance between
/// precisions. The `B` and `C` blocks are kept; only the `A` block changes.
pub fn project_noise<T: Scalar>(sigma_opt: &DMatrix<T>, mixing: &MixingQR<T>) -> Result<ProjectedNoise<T>> {
    let p = mixing.n_tasks();
    check_dims("project_noise", (p, p), sigma_opt.shape())?;
    let prec = cholesky_escalating(sigma_opt.clone(), T::one(), "Sigma_opt")?.inverse();
    let blocks = decompose_symmetric(&prec, mixing)?;
    let (v, clamped) = bounded_projected_precision(&blocks.a, mixing.r(), T::lit(PROJECTION_CLAMP))?;
    if clamped {
        log::warn!("project_noise: positivity bound active in the optimal projected precision");
    }
    let rinv = mixing.r_inv();
    let a_app = rinv.transpose() * DMatrix::from_diagonal(&v) * &rinv;
    let approx = SigmaBlocks {
        a: a_app,
        b: blocks.b.clone(),
        c: blocks.c.clone(),
    };
    let sigma_app_inv = approx.reassemble(mixing);
    let distance = (&prec - &sigma_app_inv).norm();
    let sigma_app = cholesky_escalating(sigma_app_inv.clone(), T::one(), "Sigma_app^-1")
        .map_err(|_| {
            LmcError::IndefiniteNoise("projected precision is not positive definite".into())
        })?
        .inverse();
    Ok(ProjectedNoise {
        d_prime: v,
        sigma_app,
        sigma_app_inv,
        distance,
        clamped,
    })
}

/// `exp(S)` for a skew-symmetric generator `S`, an orthonormal matrix with
/// determinant one.
pub fn orthonormal_from_skew<T: Scalar>(s: &DMatrix<T>) -> Result<DMatrix<T>> {
    let (n, m) = s.shape();
    if n != m {
        return invalid("skew generator must be square");
    }
    let sym = s + s.transpose();
    if max_abs(&sym) > symmetry_tol::<T>() * max_abs(s).max(T::one()) {
        return invalid("generator is not skew-symmetric");
    }
    Ok(expm(s))
}
