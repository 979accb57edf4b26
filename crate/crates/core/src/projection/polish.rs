//! Exact solve of the projection on a guessed active set.
//!
//! Box-active coordinates are fixed at their bound, the remaining rows are
//! solved through a pivoted QR of their transpose. Multipliers of rows that
//! the reduced solve leaves undetermined are continued from a guess (the
//! previous solve or the splitting iterate), which is what makes the
//! certificate work on degenerate flow-conservation systems.

use nalgebra::{DMatrix, DVector};

use super::admm::{split_duals, AdmmState};
use super::Reduced;
use crate::linalg::{max_abs, RankRevealingQr};

const RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub(super) struct WorkingSet {
    pub(super) ineq: Vec<bool>,
    pub(super) upper: Vec<bool>,
    pub(super) lower: Vec<bool>,
}

/// Reduced-space solution with multipliers in the convention of
/// [`super::ProjectionResult`].
#[derive(Debug, Clone)]
pub(super) struct Solution {
    pub(super) working: WorkingSet,
    pub(super) x: DVector<f64>,
    pub(super) eq_duals: DVector<f64>,
    pub(super) ineq_duals: DVector<f64>,
    pub(super) lower_duals: DVector<f64>,
    pub(super) upper_duals: DVector<f64>,
}

impl WorkingSet {
    pub(super) fn empty(red: &Reduced) -> Self {
        let n = red.free.len();
        Self { ineq: vec![false; red.a_in.nrows()], upper: vec![false; n], lower: vec![false; n] }
    }

    pub(super) fn from_admm(red: &Reduced, state: &AdmmState, tol: f64) -> Self {
        let (_, y_in, y_box) = split_duals(red, state);
        let mut ws = Self::empty(red);
        let x = &state.x;
        let ax = &red.a_in * x;
        for r in 0..ws.ineq.len() {
            ws.ineq[r] = y_in[r] > tol || (red.b_in[r] - ax[r]).abs() <= tol && y_in[r] >= 0.0;
        }
        for k in 0..x.len() {
            let up = y_box[k] > tol || ((red.upper[k] - x[k]).abs() <= tol && y_box[k] >= 0.0);
            let lo = y_box[k] < -tol || ((x[k] - red.lower[k]).abs() <= tol && y_box[k] <= 0.0);
            ws.upper[k] = up && !lo;
            ws.lower[k] = lo && !up;
        }
        ws
    }
}

impl Solution {
    /// Builds a solution from `(constraint id, multiplier)` pairs in the
    /// (equality, inequality, upper, lower) numbering of the dual active-set solver.
    pub(super) fn from_parts(red: &Reduced, x: DVector<f64>, active: &[usize], duals: &[(usize, f64)]) -> Self {
        let m_eq = red.a_eq.nrows();
        let m_in = red.a_in.nrows();
        let n = red.free.len();
        let mut sol = Solution {
            working: WorkingSet::from_ids(red, active),
            x,
            eq_duals: DVector::zeros(m_eq),
            ineq_duals: DVector::zeros(m_in),
            lower_duals: DVector::zeros(n),
            upper_duals: DVector::zeros(n),
        };
        for &(id, v) in duals {
            if id < m_eq {
                sol.eq_duals[id] = -v;
            } else if id < m_eq + m_in {
                sol.ineq_duals[id - m_eq] = v;
            } else if id < m_eq + m_in + n {
                sol.upper_duals[id - m_eq - m_in] = v;
            } else {
                sol.lower_duals[id - m_eq - m_in - n] = v;
            }
        }
        sol
    }

    /// Multipliers of the equality and inequality rows, used as the guess for the next solve.
    pub(super) fn row_duals(&self) -> (DVector<f64>, DVector<f64>) {
        (self.eq_duals.clone(), self.ineq_duals.clone())
    }
}

enum Outcome {
    Optimal(Solution),
    Update(WorkingSet, (DVector<f64>, DVector<f64>)),
    Fail,
}

fn solve_working(
    red: &Reduced,
    z: &DVector<f64>,
    ws: &WorkingSet,
    guess: Option<&(DVector<f64>, DVector<f64>)>,
    tol: f64,
) -> Outcome {
    let n = red.free.len();
    let m_eq = red.a_eq.nrows();
    let mut x = DVector::zeros(n);
    let mut interior = Vec::new();
    let mut bound = Vec::new();
    for k in 0..n {
        if ws.upper[k] {
            x[k] = red.upper[k];
            bound.push(k);
        } else if ws.lower[k] {
            x[k] = red.lower[k];
            bound.push(k);
        } else {
            interior.push(k);
        }
    }
    let active_in: Vec<usize> = (0..ws.ineq.len()).filter(|&r| ws.ineq[r]).collect();
    let rows = m_eq + active_in.len();
    let mut e_full = DMatrix::zeros(rows, n);
    let mut rhs = DVector::zeros(rows);
    e_full.view_mut((0, 0), (m_eq, n)).copy_from(&red.a_eq);
    rhs.rows_mut(0, m_eq).copy_from(&red.b_eq);
    for (i, &r) in active_in.iter().enumerate() {
        e_full.row_mut(m_eq + i).copy_from(&red.a_in.row(r));
        rhs[m_eq + i] = red.b_in[r];
    }
    let x_bound = x.select_rows(&bound);
    let e_rhs = if bound.is_empty() { rhs.clone() } else { &rhs - e_full.select_columns(&bound) * &x_bound };
    let e_int = e_full.select_columns(&interior);
    let z_int = z.select_rows(&interior);

    let mut mu = DVector::zeros(rows);
    let x_int = if interior.is_empty() {
        if e_rhs.iter().any(|v| v.abs() > tol) {
            return Outcome::Fail;
        }
        z_int.clone()
    } else if rows == 0 {
        z_int.clone()
    } else {
        let Ok(qr) = RankRevealingQr::new(&e_int.transpose(), RANK_TOL) else {
            return Outcome::Fail;
        };
        let k = qr.rank();
        let perm = qr.permutation();
        let qk = qr.q().columns(0, k).into_owned();
        let rk = qr.r().view((0, 0), (k, k)).into_owned();
        let e_s = DVector::from_fn(k, |i, _| e_rhs[perm[i]]);
        // Rᵀ v = e_s (forward substitution).
        let mut v = DVector::zeros(k);
        for i in 0..k {
            let mut acc = e_s[i];
            for j in 0..i {
                acc -= rk[(j, i)] * v[j];
            }
            v[i] = acc / rk[(i, i)];
        }
        let w = qk.transpose() * &z_int - v;
        let x_int = &z_int - &qk * &w;
        // R μ_sel = w (back substitution).
        let mut mu_sel = DVector::zeros(k);
        for i in (0..k).rev() {
            let mut acc = w[i];
            for j in i + 1..k {
                acc -= rk[(i, j)] * mu_sel[j];
            }
            mu_sel[i] = acc / rk[(i, i)];
        }
        for i in 0..k {
            mu[perm[i]] = mu_sel[i];
        }
        let resid = &e_int * &x_int - &e_rhs;
        if max_abs(&resid) > tol {
            return Outcome::Fail;
        }
        x_int
    };
    for (i, &k) in interior.iter().enumerate() {
        x[k] = x_int[i];
    }

    // Continue multipliers that the reduced system leaves free from the guess.
    if let Some((g_eq, g_in)) = guess {
        let mut g = DVector::zeros(rows);
        g.rows_mut(0, m_eq).copy_from(g_eq);
        for (i, &r) in active_in.iter().enumerate() {
            g[m_eq + i] = g_in[r];
        }
        let delta = &g - &mu;
        let correction = if interior.is_empty() || rows == 0 {
            delta
        } else {
            match RankRevealingQr::new(&e_int, RANK_TOL) {
                Ok(qr) => {
                    let u = qr.range_basis();
                    &delta - &u * (u.transpose() * &delta)
                }
                Err(_) => return Outcome::Fail,
            }
        };
        mu += correction;
    }

    let grad = &x - z + e_full.transpose() * &mu;
    let mut sol = Solution {
        working: ws.clone(),
        x: x.clone(),
        eq_duals: mu.rows(0, m_eq).into_owned(),
        ineq_duals: DVector::zeros(ws.ineq.len()),
        lower_duals: DVector::zeros(n),
        upper_duals: DVector::zeros(n),
    };
    for (i, &r) in active_in.iter().enumerate() {
        sol.ineq_duals[r] = mu[m_eq + i];
    }
    for &k in &bound {
        if ws.upper[k] {
            sol.upper_duals[k] = -grad[k];
        } else {
            sol.lower_duals[k] = grad[k];
        }
    }

    let mut next = ws.clone();
    let mut changed = false;
    let ax = &red.a_in * &x;
    for r in 0..ws.ineq.len() {
        if ws.ineq[r] {
            if sol.ineq_duals[r] < -tol {
                next.ineq[r] = false;
                changed = true;
            }
        } else if ax[r] - red.b_in[r] > tol {
            next.ineq[r] = true;
            changed = true;
        }
    }
    for k in 0..n {
        if ws.upper[k] {
            if sol.upper_duals[k] < -tol {
                next.upper[k] = false;
                changed = true;
            }
        } else if ws.lower[k] {
            if sol.lower_duals[k] < -tol {
                next.lower[k] = false;
                changed = true;
            }
        } else if x[k] > red.upper[k] + tol {
            next.upper[k] = true;
            changed = true;
        } else if x[k] < red.lower[k] - tol {
            next.lower[k] = true;
            changed = true;
        }
    }
    if changed {
        let duals = sol.row_duals();
        Outcome::Update(next, duals)
    } else {
        Outcome::Optimal(sol)
    }
}

/// Primal-dual active-set iterations starting from `ws`.
pub(super) fn refine(
    red: &Reduced,
    z: &DVector<f64>,
    mut ws: WorkingSet,
    mut guess: Option<(DVector<f64>, DVector<f64>)>,
    tol: f64,
    max_rounds: usize,
) -> Option<Solution> {
    let mut seen: Vec<WorkingSet> = Vec::new();
    for _ in 0..max_rounds {
        match solve_working(red, z, &ws, guess.as_ref(), tol) {
            Outcome::Optimal(sol) => return Some(sol),
            Outcome::Fail => return None,
            Outcome::Update(next, duals) => {
                if seen.contains(&next) {
                    return None;
                }
                seen.push(ws);
                ws = next;
                guess = Some(duals);
            }
        }
    }
    None
}
