//! Hand-derived adjoints of `-log p(Y)` with respect to the unconstrained
//! parameter vector of an [`LmcModel`].

use nalgebra::{DMatrix, DVector};

use crate::error::Result;
use crate::inference::{full_covariance, latent_factors, Dataset};
use crate::kernels::kernel_matrix_d_log_lengthscale;
use crate::linalg::{cholesky_escalating, expm_frechet_adjoint};
use crate::noise_param::compute_t;
use crate::scalar::Scalar;

use super::model::{lower_pairs, LmcModel, Variant};

/// `-log p(Y)` and its gradient over the model's parameter vector.
#[derive(Debug, Clone)]
pub struct LossGradient<T: Scalar> {
    pub loss: T,
    pub gradient: DVector<T>,
}

pub fn loss_gradient<T: Scalar>(model: &LmcModel<T>, data: &Dataset<T>) -> Result<LossGradient<T>> {
    match model.variant() {
        Variant::Exact => exact_gradient(model, data),
        _ => projected_gradient(model, data),
    }
}

fn frobenius_inner<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    a.component_mul(b).sum()
}

fn projected_gradient<T: Scalar>(model: &LmcModel<T>, data: &Dataset<T>) -> Result<LossGradient<T>> {
    let state = model.projected_state()?;
    let params = &state.params;
    let flags = params.flags();
    let (p, q, n) = (data.n_tasks(), model.n_latent(), data.n_points());
    let y = &data.y;
    let half = T::lit(0.5);
    let nn = T::count(n);

    let kmats = state.kernels.train_matrices(&data.x)?;
    let factors = latent_factors(&kmats, params.sigma_p())?;
    let t = compute_t(params);
    let z = &t * y;

    let mix = params.mixing();
    let (qm, r, qperp) = (mix.q(), mix.r(), mix.qperp());
    let rinv = mix.r_inv();
    let l = params.l();
    let m = params.m();
    let sigma_p = params.sigma_p();

    let w = qperp.transpose() * y;
    let lw = l.transpose() * &w;
    let mut loss = half
        * (T::count((p - q) * n) * T::ln_2pi()
            + (nn + nn) * params.log_abs_det_r()
            + nn * params.log_det_b_tilde()
            + lw.norm_squared());

    let mut g_z = DMatrix::zeros(q, n);
    let mut d_sigma2 = DVector::zeros(q);
    let mut d_log_ls = DVector::zeros(q);
    for (i, f) in factors.iter().enumerate() {
        let zi = z.row(i).transpose();
        let alpha = f.solve_vec(&zi);
        loss += half * (zi.dot(&alpha) + f.log_det() + nn * T::ln_2pi());
        let ainv = f.inverse();
        let g_a = (&ainv - &alpha * alpha.transpose()) * half;
        d_sigma2[i] = g_a.trace();
        let dk = kernel_matrix_d_log_lengthscale(&data.x, state.kernels.get(i));
        d_log_ls[i] = frobenius_inner(&g_a, &dk);
        g_z.row_mut(i).copy_from(&alpha.transpose());
    }

    let g_t = &g_z * y.transpose();
    let sp = DMatrix::from_diagonal(sigma_p);
    let g_l = &w * lw.transpose();
    let g_m = &sp * &g_t * qperp;
    let gtqm = &g_t * qperp * m.transpose();
    for i in 0..q {
        d_sigma2[i] += gtqm[(i, i)];
    }
    let g_r = -(rinv.transpose() * &g_t * qm * rinv.transpose());
    let g_q = g_t.transpose() * &rinv;
    let g_qperp = y * (y.transpose() * qperp * l * l.transpose()) + g_t.transpose() * &sp * m;

    let mut g_qplus = DMatrix::zeros(p, p);
    g_qplus.columns_mut(0, q).copy_from(&g_q);
    g_qplus.columns_mut(q, p - q).copy_from(&g_qperp);
    let g_e = model.basis().transpose() * g_qplus;
    let g_s = expm_frechet_adjoint(&state.generator, &g_e);

    let mut grad = Vec::with_capacity(model.theta().len());
    grad.extend(d_log_ls.iter().copied());
    grad.extend(lower_pairs(p).map(|(a, b)| g_s[(a, b)] - g_s[(b, a)]));
    grad.extend((0..q).map(|i| g_r[(i, i)] * r[(i, i)] + nn));
    if !flags.oilmm {
        for j in 0..q {
            for i in 0..j {
                grad.push(g_r[(i, j)]);
            }
        }
    }
    grad.extend((0..q).map(|i| d_sigma2[i] * sigma_p[i]));
    if !(flags.bdn || flags.oilmm) {
        for a in 0..q {
            for b in 0..(p - q) {
                grad.push(g_m[(a, b)]);
            }
        }
    }
    if flags.oilmm {
        if p > q {
            grad.push(l[(0, 0)] * g_l.trace() - T::count(n * (p - q)));
        }
    } else {
        grad.extend((0..(p - q)).map(|j| g_l[(j, j)] * l[(j, j)] - nn));
        if !flags.diag_b {
            grad.extend(lower_pairs(p - q).map(|(a, b)| g_l[(a, b)]));
        }
    }
    debug_assert_eq!(grad.len(), model.theta().len());
    Ok(LossGradient {
        loss,
        gradient: DVector::from_vec(grad),
    })
}

fn exact_gradient<T: Scalar>(model: &LmcModel<T>, data: &Dataset<T>) -> Result<LossGradient<T>> {
    let state = model.exact_state()?;
    let (p, q, n) = (data.n_tasks(), model.n_latent(), data.n_points());
    let h = &state.h;
    let sigma = state.sigma();
    let half = T::lit(0.5);

    let kmats = state.kernels.train_matrices(&data.x)?;
    let big = full_covariance(h, &kmats, &sigma);
    let scale = (0..big.nrows()).fold(T::zero(), |m, i| m.max(big[(i, i)]));
    let factor = cholesky_escalating(big, scale, "dense LMC covariance")?;
    let yv = data.y_v();
    let alpha = factor.solve_vec(&yv);
    let loss = half * (yv.dot(&alpha) + factor.log_det() + T::count(n * p) * T::ln_2pi());

    let mut g = factor.inverse();
    g.ger(-T::one(), &alpha, &alpha, T::one());
    g *= half;

    let dks: Vec<DMatrix<T>> = state
        .kernels
        .iter()
        .map(|k| kernel_matrix_d_log_lengthscale(&data.x, k))
        .collect();
    let mut g_sigma = DMatrix::zeros(p, p);
    // s[i][(a, b)] = <G_ab, K_i>
    let mut s = vec![DMatrix::zeros(p, p); q];
    let mut d_log_ls = DVector::<T>::zeros(q);
    for b in 0..p {
        for a in 0..p {
            let block = g.view((a * n, b * n), (n, n));
            g_sigma[(a, b)] = block.trace();
            for i in 0..q {
                s[i][(a, b)] = block.component_mul(&kmats[i]).sum();
                let w = h[(a, i)] * h[(b, i)];
                if w != T::zero() {
                    d_log_ls[i] += w * block.component_mul(&dks[i]).sum();
                }
            }
        }
    }
    let g_h = DMatrix::from_fn(p, q, |c, i| {
        let v = (0..p).fold(T::zero(), |acc, b| acc + s[i][(c, b)] * h[(b, i)]);
        v + v
    });
    let lsig = &state.sigma_chol;
    let g_l = (&g_sigma * lsig) * T::lit(2.0);

    let mut grad = Vec::with_capacity(model.theta().len());
    grad.extend(d_log_ls.iter().copied());
    for a in 0..p {
        for i in 0..q {
            grad.push(g_h[(a, i)]);
        }
    }
    grad.extend((0..p).map(|j| g_l[(j, j)] * lsig[(j, j)]));
    grad.extend(lower_pairs(p).map(|(a, b)| g_l[(a, b)]));
    debug_assert_eq!(grad.len(), model.theta().len());
    Ok(LossGradient {
        loss,
        gradient: DVector::from_vec(grad),
    })
}
