//! Dense linear-algebra helpers: jittered Cholesky, blocked triangular
//! inversion, the matrix exponential and its adjoint Fréchet derivative.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{LmcError, Result};
use crate::scalar::Scalar;

/// Relative jitter added to kernel matrices before any factorization.
pub const BASE_JITTER: f64 = 1e-8;
/// Largest relative jitter tried by [`cholesky_escalating`].
pub const MAX_JITTER: f64 = 1e-4;

/// A Cholesky factor together with the diagonal jitter that made it succeed.
pub struct Factor<T: Scalar> {
    pub chol: Cholesky<T, Dyn>,
    pub jitter: T,
}

impl<T: Scalar> Factor<T> {
    pub fn log_det(&self) -> T {
        log_det(&self.chol)
    }

    pub fn solve_vec(&self, b: &DVector<T>) -> DVector<T> {
        self.chol.solve(b)
    }

    pub fn solve(&self, b: &DMatrix<T>) -> DMatrix<T> {
        self.chol.solve(b)
    }

    /// Explicit inverse `L^-T L^-1`.
    pub fn inverse(&self) -> DMatrix<T> {
        let linv = lower_triangular_inverse(&self.chol.l());
        let mut inv = linv.transpose() * &linv;
        symmetrize(&mut inv);
        inv
    }
}

/// Factorizes `m`, adding `scale * 1e-8`, `scale * 1e-7`, ... up to
/// `scale * 1e-4` to the diagonal when the plain factorization fails.
pub fn cholesky_escalating<T: Scalar>(m: DMatrix<T>, scale: T, what: &str) -> Result<Factor<T>> {
    if !m.iter().all(|v| v.finite()) {
        return Err(LmcError::NumericalDegeneracy {
            what: format!("{what} (non-finite entries)"),
            jitter: 0.0,
        });
    }
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(Factor {
            chol,
            jitter: T::zero(),
        });
    }
    let scale = if scale > T::zero() { scale } else { T::one() };
    let mut rel = BASE_JITTER;
    loop {
        let jitter = scale * T::lit(rel);
        let mut jittered = m.clone();
        for i in 0..jittered.nrows() {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            log::debug!("{what}: Cholesky succeeded with extra jitter {rel:e} x {scale}");
            return Ok(Factor { chol, jitter });
        }
        if rel >= MAX_JITTER * 0.5 {
            return Err(LmcError::NumericalDegeneracy {
                what: what.to_string(),
                jitter: jitter.to_f64_lossy(),
            });
        }
        rel *= 10.0;
    }
}

pub fn log_det<T: Scalar>(chol: &Cholesky<T, Dyn>) -> T {
    let l = chol.l_dirty();
    let mut acc = T::zero();
    for i in 0..l.nrows() {
        acc += l[(i, i)].ln();
    }
    acc + acc
}

pub fn symmetrize<T: Scalar>(m: &mut DMatrix<T>) {
    let n = m.nrows();
    let half = T::lit(0.5);
    for j in 0..n {
        for i in (j + 1)..n {
            let v = (m[(i, j)] + m[(j, i)]) * half;
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn max_abs<T: Scalar>(m: &DMatrix<T>) -> T {
    m.iter().fold(T::zero(), |acc, v| acc.max(v.magnitude()))
}

pub fn max_asymmetry<T: Scalar>(m: &DMatrix<T>) -> T {
    let mut worst = T::zero();
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).magnitude());
        }
    }
    worst
}

/// Inverse of a lower-triangular matrix by recursive 2x2 blocking, so that
/// the bulk of the work runs through matrix-matrix products.
pub fn lower_triangular_inverse<T: Scalar>(l: &DMatrix<T>) -> DMatrix<T> {
    let n = l.nrows();
    if n <= 48 {
        return small_lower_inverse(l);
    }
    let k = n / 2;
    let l11 = l.view((0, 0), (k, k)).into_owned();
    let l21 = l.view((k, 0), (n - k, k)).into_owned();
    let l22 = l.view((k, k), (n - k, n - k)).into_owned();
    let x11 = lower_triangular_inverse(&l11);
    let x22 = lower_triangular_inverse(&l22);
    let x21 = -(&x22 * (&l21 * &x11));
    let mut out = DMatrix::zeros(n, n);
    out.view_mut((0, 0), (k, k)).copy_from(&x11);
    out.view_mut((k, 0), (n - k, k)).copy_from(&x21);
    out.view_mut((k, k), (n - k, n - k)).copy_from(&x22);
    out
}

fn small_lower_inverse<T: Scalar>(l: &DMatrix<T>) -> DMatrix<T> {
    let n = l.nrows();
    let mut x = DMatrix::zeros(n, n);
    for j in 0..n {
        x[(j, j)] = T::one() / l[(j, j)];
        for i in (j + 1)..n {
            let mut acc = T::zero();
            for k in j..i {
                acc += l[(i, k)] * x[(k, j)];
            }
            x[(i, j)] = -acc / l[(i, i)];
        }
    }
    x
}

/// Inverse of an upper-triangular matrix.
pub fn upper_triangular_inverse<T: Scalar>(r: &DMatrix<T>) -> DMatrix<T> {
    lower_triangular_inverse(&r.transpose()).transpose()
}

/// Thin QR of a full-column-rank `p x q` matrix with the sign convention
/// `diag(R) > 0`.
pub fn qr_positive<T: Scalar>(h: &DMatrix<T>) -> Result<(DMatrix<T>, DMatrix<T>)> {
    let (p, q) = h.shape();
    if q == 0 || q > p {
        return Err(LmcError::InvalidInput(format!(
            "mixing matrix must be p x q with 1 <= q <= p, got {p}x{q}"
        )));
    }
    let qr = h.clone().qr();
    let mut qm = qr.q();
    let mut rm = qr.r();
    let scale = max_abs(h);
    for i in 0..q {
        let d = rm[(i, i)];
        if d.magnitude() <= scale * T::lit(1e-13) {
            return Err(LmcError::InvalidInput(
                "mixing matrix is rank deficient".to_string(),
            ));
        }
        if d < T::zero() {
            qm.column_mut(i).neg_mut();
            rm.row_mut(i).neg_mut();
        }
    }
    Ok((qm, rm))
}

/// Orthonormal basis of the orthogonal complement of the column space of
/// the column-orthonormal matrix `q`.
pub fn orthonormal_complement<T: Scalar>(q: &DMatrix<T>) -> DMatrix<T> {
    let (p, k) = q.shape();
    if k == p {
        return DMatrix::zeros(p, 0);
    }
    let mut aug = DMatrix::zeros(p, k + p);
    aug.view_mut((0, 0), (p, k)).copy_from(q);
    aug.view_mut((0, k), (p, p)).fill_with_identity();
    let full = aug.qr().q();
    full.columns(k, p - k).into_owned()
}

fn norm1<T: Scalar>(a: &DMatrix<T>) -> T {
    let mut best = T::zero();
    for j in 0..a.ncols() {
        let s = a.column(j).iter().fold(T::zero(), |acc, v| acc + v.magnitude());
        best = best.max(s);
    }
    best
}

const PADE3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA: [f64; 5] = [
    1.495585217958292e-2,
    2.53939833006323e-1,
    9.504178996162932e-1,
    2.097847961257068,
    5.371920351148152,
];

/// Matrix exponential by scaling and squaring with diagonal Padé
/// approximants of degree 3 to 13.
pub fn expm<T: Scalar>(a: &DMatrix<T>) -> DMatrix<T> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "expm needs a square matrix");
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let nrm = norm1(a).to_f64_lossy();
    let ident = DMatrix::<T>::identity(n, n);
    let low_order: [&[f64]; 4] = [&PADE3, &PADE5, &PADE7, &PADE9];
    for (coeffs, theta) in low_order.iter().zip(THETA.iter()) {
        if nrm <= *theta {
            return pade_low(a, coeffs, &ident);
        }
    }
    let s = if nrm > THETA[4] {
        (nrm / THETA[4]).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = a * T::lit(0.5f64.powi(s));
    let mut e = pade13(&scaled, &ident);
    for _ in 0..s {
        e = &e * &e;
    }
    e
}

fn pade_solve<T: Scalar>(u: DMatrix<T>, v: DMatrix<T>) -> DMatrix<T> {
    let num = &v + &u;
    let den = v - u;
    den.lu()
        .solve(&num)
        .expect("Padé denominator is nonsingular for scaled arguments")
}

fn pade_low<T: Scalar>(a: &DMatrix<T>, b: &[f64], ident: &DMatrix<T>) -> DMatrix<T> {
    let a2 = a * a;
    let mut odd = ident * T::lit(b[1]);
    let mut even = ident * T::lit(b[0]);
    let mut pow = ident.clone();
    let mut k = 2;
    while k < b.len() {
        pow = &pow * &a2;
        even += &pow * T::lit(b[k]);
        if k + 1 < b.len() {
            odd += &pow * T::lit(b[k + 1]);
        }
        k += 2;
    }
    let u = a * odd;
    pade_solve(u, even)
}

fn pade13<T: Scalar>(a: &DMatrix<T>, ident: &DMatrix<T>) -> DMatrix<T> {
    let b: Vec<T> = PADE13.iter().map(|&x| T::lit(x)).collect();
    let a2 = a * a;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let inner_u = &a6 * b[13] + &a4 * b[11] + &a2 * b[9];
    let u_poly = &a6 * inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + ident * b[1];
    let u = a * u_poly;
    let inner_v = &a6 * b[12] + &a4 * b[10] + &a2 * b[8];
    let v = &a6 * inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + ident * b[0];
    pade_solve(u, v)
}

/// Adjoint of the Fréchet derivative of `exp` at `x` applied to `g`:
/// the matrix `Gx` such that `<g, L_exp(x, e)> = <Gx, e>` for all `e`.
///
/// Computed as the upper-right block of `exp([[x^T, g], [0, x^T]])`.
pub fn expm_frechet_adjoint<T: Scalar>(x: &DMatrix<T>, g: &DMatrix<T>) -> DMatrix<T> {
    let n = x.nrows();
    let xt = x.transpose();
    let mut block = DMatrix::zeros(2 * n, 2 * n);
    block.view_mut((0, 0), (n, n)).copy_from(&xt);
    block.view_mut((n, n), (n, n)).copy_from(&xt);
    block.view_mut((0, n), (n, n)).copy_from(g);
    let e = expm(&block);
    e.view((0, n), (n, n)).into_owned()
}
