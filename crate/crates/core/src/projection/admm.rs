//! Operator splitting for `min ½‖x − z‖²` s.t. `l ≤ K x ≤ u`, with
//! `K = [A_eq; A_in; I]` over the free coordinates.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{ProjectionSettings, Reduced};
use crate::error::{Error, Result};
use crate::linalg::max_abs;

const RHO: f64 = 1.0;
/// Equality rows get a stiffer penalty than inequality and box rows.
const RHO_EQ: f64 = 1e3;
const SIGMA: f64 = 1e-6;

#[derive(Debug, Clone)]
pub(super) struct Factorization {
    k: DMatrix<f64>,
    rho: DVector<f64>,
    sigma: f64,
    chol: Option<Cholesky<f64, Dyn>>,
}

impl Factorization {
    pub(super) fn new(a_eq: &DMatrix<f64>, a_in: &DMatrix<f64>) -> Result<Self> {
        let n = a_eq.ncols();
        let m_eq = a_eq.nrows();
        let m_in = a_in.nrows();
        let mut k = DMatrix::zeros(m_eq + m_in + n, n);
        k.view_mut((0, 0), (m_eq, n)).copy_from(a_eq);
        k.view_mut((m_eq, 0), (m_in, n)).copy_from(a_in);
        k.view_mut((m_eq + m_in, 0), (n, n)).fill_with_identity();
        let rho = DVector::from_fn(m_eq + m_in + n, |r, _| if r < m_eq { RHO_EQ } else { RHO });
        let chol = if n == 0 {
            None
        } else {
            let mut kt_rk = k.transpose() * DMatrix::from_diagonal(&rho) * &k;
            for i in 0..n {
                kt_rk[(i, i)] += 1.0 + SIGMA;
            }
            Some(Cholesky::new(kt_rk).ok_or(Error::NumericalRank { condition: f64::INFINITY })?)
        };
        Ok(Self { k, rho, sigma: SIGMA, chol })
    }
}

#[derive(Debug, Clone)]
pub(super) struct AdmmState {
    pub(super) x: DVector<f64>,
    pub(super) zc: DVector<f64>,
    pub(super) y: DVector<f64>,
}

impl AdmmState {
    pub(super) fn zeros(red: &Reduced) -> Self {
        let n = red.free.len();
        let m = red.admm.k.nrows();
        Self { x: DVector::zeros(n), zc: DVector::zeros(m), y: DVector::zeros(m) }
    }

    pub(super) fn matches(&self, red: &Reduced) -> bool {
        self.x.len() == red.free.len() && self.zc.len() == red.admm.k.nrows()
    }
}

fn bounds(red: &Reduced) -> (DVector<f64>, DVector<f64>) {
    let m_eq = red.a_eq.nrows();
    let m_in = red.a_in.nrows();
    let n = red.free.len();
    let m = m_eq + m_in + n;
    let mut l = DVector::zeros(m);
    let mut u = DVector::zeros(m);
    for r in 0..m_eq {
        l[r] = red.b_eq[r];
        u[r] = red.b_eq[r];
    }
    for r in 0..m_in {
        l[m_eq + r] = f64::NEG_INFINITY;
        u[m_eq + r] = red.b_in[r];
    }
    for k in 0..n {
        l[m_eq + m_in + k] = red.lower[k];
        u[m_eq + m_in + k] = red.upper[k];
    }
    (l, u)
}

/// Runs at most `max_iter` iterations; returns the final max of primal and dual residuals.
pub(super) fn solve(
    red: &Reduced,
    z: &DVector<f64>,
    state: &mut AdmmState,
    tol: f64,
    max_iter: usize,
    settings: &ProjectionSettings,
) -> f64 {
    let fac = &red.admm;
    let Some(chol) = fac.chol.as_ref() else {
        return 0.0;
    };
    let (l, u) = bounds(red);
    let kt = fac.k.transpose();
    let alpha = settings.relaxation;
    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let rhs = fac.sigma * &state.x + z + &kt * (fac.rho.component_mul(&state.zc) - &state.y);
        let x_tilde = chol.solve(&rhs);
        let z_tilde = &fac.k * &x_tilde;
        state.x = alpha * &x_tilde + (1.0 - alpha) * &state.x;
        let z_hat = alpha * &z_tilde + (1.0 - alpha) * &state.zc;
        let mut z_new = &z_hat + state.y.component_div(&fac.rho);
        for r in 0..z_new.len() {
            z_new[r] = z_new[r].clamp(l[r], u[r]);
        }
        state.y += fac.rho.component_mul(&(&z_hat - &z_new));
        state.zc = z_new;

        let kx = &fac.k * &state.x;
        let primal = max_abs(&(&kx - &state.zc));
        let kty = &kt * &state.y;
        let dual = max_abs(&(&state.x - z + &kty));
        residual = primal.max(dual);
        if residual <= tol {
            break;
        }
    }
    residual
}

/// Splits the stacked multiplier into (equality, inequality, box) parts.
pub(super) fn split_duals(red: &Reduced, state: &AdmmState) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
    let m_eq = red.a_eq.nrows();
    let m_in = red.a_in.nrows();
    let n = red.free.len();
    (
        state.y.rows(0, m_eq).into_owned(),
        state.y.rows(m_eq, m_in).into_owned(),
        state.y.rows(m_eq + m_in, n).into_owned(),
    )
}
