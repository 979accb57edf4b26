//! Dual active-set method (Goldfarb-Idnani) for `min ½‖x − z‖²` over the
//! reduced constraints. Exact up to rounding and robust to linearly dependent
//! rows, which the flow-conservation equalities always contain.

use nalgebra::{DMatrix, DVector};

use super::polish::{Solution, WorkingSet};
use super::Reduced;

/// Constraint `s(x) = nᵀx − b ≥ 0` identified by its index in the
/// (equality, inequality, upper, lower) numbering.
#[derive(Debug, Clone, Copy)]
struct Row {
    id: usize,
    /// Equalities whose residual was positive are added with a flipped normal.
    flipped: bool,
}

struct Constraints<'a> {
    red: &'a Reduced,
    m_eq: usize,
    m_in: usize,
    n: usize,
}

impl<'a> Constraints<'a> {
    fn new(red: &'a Reduced) -> Self {
        Self { red, m_eq: red.a_eq.nrows(), m_in: red.a_in.nrows(), n: red.free.len() }
    }

    fn count(&self) -> usize {
        self.m_eq + self.m_in + 2 * self.n
    }

    fn is_eq(&self, id: usize) -> bool {
        id < self.m_eq
    }

    /// Normal vector and right-hand side in `nᵀx ≥ b` form.
    fn normal(&self, row: Row) -> (DVector<f64>, f64) {
        let id = row.id;
        let (n, b) = if id < self.m_eq {
            (self.red.a_eq.row(id).transpose(), self.red.b_eq[id])
        } else if id < self.m_eq + self.m_in {
            let r = id - self.m_eq;
            (-self.red.a_in.row(r).transpose(), -self.red.b_in[r])
        } else if id < self.m_eq + self.m_in + self.n {
            let k = id - self.m_eq - self.m_in;
            let mut e = DVector::zeros(self.n);
            e[k] = -1.0;
            (e, -self.red.upper[k])
        } else {
            let k = id - self.m_eq - self.m_in - self.n;
            let mut e = DVector::zeros(self.n);
            e[k] = 1.0;
            (e, self.red.lower[k])
        };
        if row.flipped {
            (-n, -b)
        } else {
            (n, b)
        }
    }

    /// Signed residual of constraint `id` in its unflipped form.
    fn slack(&self, id: usize, x: &DVector<f64>) -> f64 {
        if id < self.m_eq {
            self.red.a_eq.row(id).dot(&x.transpose()) - self.red.b_eq[id]
        } else if id < self.m_eq + self.m_in {
            let r = id - self.m_eq;
            self.red.b_in[r] - self.red.a_in.row(r).dot(&x.transpose())
        } else if id < self.m_eq + self.m_in + self.n {
            let k = id - self.m_eq - self.m_in;
            self.red.upper[k] - x[k]
        } else {
            let k = id - self.m_eq - self.m_in - self.n;
            x[k] - self.red.lower[k]
        }
    }

    fn norm(&self, id: usize) -> f64 {
        if id < self.m_eq {
            self.red.a_eq.row(id).norm()
        } else if id < self.m_eq + self.m_in {
            self.red.a_in.row(id - self.m_eq).norm()
        } else {
            1.0
        }
    }
}

/// Applies the Givens rotation zeroing `b` against `a`; returns `(c, s, r)`.
fn givens(a: f64, b: f64) -> (f64, f64, f64) {
    if b == 0.0 {
        return (1.0, 0.0, a);
    }
    let r = a.hypot(b);
    (a / r, b / r, r)
}

/// Returns `None` when the constraints are inconsistent or the iteration cap is hit.
pub(super) fn solve(red: &Reduced, z: &DVector<f64>, tol: f64) -> Option<Solution> {
    let cons = Constraints::new(red);
    let n = cons.n;
    let mut x = z.clone();
    if n == 0 {
        return Some(Solution::from_parts(red, x, &[], &[]));
    }
    // J has orthonormal columns; the first q span the active normals, with
    // active normals N = J[:, ..q] R.
    let mut j = DMatrix::<f64>::identity(n, n);
    let mut r = DMatrix::<f64>::zeros(n, n);
    let mut active: Vec<Row> = Vec::new();
    let mut u: Vec<f64> = Vec::new();
    let max_steps = 50 * (cons.count() + n) + 100;
    let mut steps = 0;

    loop {
        // Pick the most violated constraint, equalities first.
        let mut pick: Option<(Row, f64)> = None;
        for id in 0..cons.count() {
            if active.iter().any(|a| a.id == id) {
                continue;
            }
            let s = cons.slack(id, &x) / cons.norm(id).max(1e-300);
            let (viol, flipped) = if cons.is_eq(id) { (s.abs(), s > 0.0) } else { (-s, false) };
            if viol <= tol {
                continue;
            }
            let better = match pick {
                None => true,
                Some((p, v)) => {
                    let p_eq = cons.is_eq(p.id);
                    (cons.is_eq(id) && !p_eq) || (cons.is_eq(id) == p_eq && viol > v)
                }
            };
            if better {
                pick = Some((Row { id, flipped }, viol));
            }
        }
        let Some((p, _)) = pick else {
            break;
        };
        let (np, bp) = cons.normal(p);
        let mut u_p = 0.0;

        loop {
            steps += 1;
            if steps > max_steps {
                return None;
            }
            let q = active.len();
            let d = j.transpose() * &np;
            // Primal direction in the complement of the active normals.
            let mut step = DVector::zeros(n);
            for c in q..n {
                step.axpy(d[c], &j.column(c), 1.0);
            }
            // Dual direction r_dir = R⁻¹ d[..q].
            let mut r_dir = vec![0.0; q];
            for row in (0..q).rev() {
                let mut acc = d[row];
                for c in row + 1..q {
                    acc -= r[(row, c)] * r_dir[c];
                }
                r_dir[row] = acc / r[(row, row)];
            }
            // Largest dual step keeping inequality multipliers non-negative.
            let mut t1 = f64::INFINITY;
            let mut drop_at = None;
            for (k, a) in active.iter().enumerate() {
                if !cons.is_eq(a.id) && r_dir[k] > 0.0 {
                    let t = u[k] / r_dir[k];
                    if t < t1 {
                        t1 = t;
                        drop_at = Some(k);
                    }
                }
            }
            let s_p = np.dot(&x) - bp;
            let step_norm = step.norm();
            let t2 = if step_norm > 1e-12 * np.norm() { -s_p / step.dot(&np) } else { f64::INFINITY };
            let t = t1.min(t2);
            if !t.is_finite() {
                return None;
            }
            if t2.is_finite() {
                x.axpy(t, &step, 1.0);
            }
            for k in 0..q {
                u[k] -= t * r_dir[k];
            }
            u_p += t;
            if t2 <= t1 {
                // Full step: add p to the active set.
                add_constraint(&mut j, &mut r, q, d);
                active.push(p);
                u.push(u_p);
                break;
            }
            let k = drop_at.expect("finite partial step has a blocking constraint");
            drop_constraint(&mut j, &mut r, q, k);
            active.remove(k);
            u.remove(k);
        }
    }

    let pairs: Vec<(usize, f64)> =
        active.iter().zip(u.iter()).map(|(a, &m)| (a.id, if a.flipped { -m } else { m })).collect();
    let ids: Vec<usize> = active.iter().map(|a| a.id).collect();
    Some(Solution::from_parts(red, x, &ids, &pairs))
}

/// Rotates `d` (= Jᵀ n_p) so that its tail collapses onto position `q`, then
/// appends it as column `q` of `R`.
fn add_constraint(j: &mut DMatrix<f64>, r: &mut DMatrix<f64>, q: usize, mut d: DVector<f64>) {
    let n = j.nrows();
    for c in (q + 1..n).rev() {
        let (cs, sn, h) = givens(d[c - 1], d[c]);
        if sn == 0.0 {
            continue;
        }
        d[c - 1] = h;
        d[c] = 0.0;
        for row in 0..n {
            let a = j[(row, c - 1)];
            let b = j[(row, c)];
            j[(row, c - 1)] = cs * a + sn * b;
            j[(row, c)] = -sn * a + cs * b;
        }
    }
    for row in 0..=q {
        r[(row, q)] = d[row];
    }
}

/// Removes column `k` of the `q`-column triangular factor and restores its shape.
fn drop_constraint(j: &mut DMatrix<f64>, r: &mut DMatrix<f64>, q: usize, k: usize) {
    let n = j.nrows();
    for c in k..q - 1 {
        for row in 0..n {
            r[(row, c)] = r[(row, c + 1)];
        }
    }
    for row in 0..n {
        r[(row, q - 1)] = 0.0;
    }
    // Columns k..q-1 now have one subdiagonal entry each.
    for c in k..q - 1 {
        let (cs, sn, h) = givens(r[(c, c)], r[(c + 1, c)]);
        if sn == 0.0 {
            continue;
        }
        r[(c, c)] = h;
        r[(c + 1, c)] = 0.0;
        for col in c + 1..q - 1 {
            let a = r[(c, col)];
            let b = r[(c + 1, col)];
            r[(c, col)] = cs * a + sn * b;
            r[(c + 1, col)] = -sn * a + cs * b;
        }
        for row in 0..n {
            let a = j[(row, c)];
            let b = j[(row, c + 1)];
            j[(row, c)] = cs * a + sn * b;
            j[(row, c + 1)] = -sn * a + cs * b;
        }
    }
}

impl WorkingSet {
    pub(super) fn from_ids(red: &Reduced, ids: &[usize]) -> Self {
        let m_eq = red.a_eq.nrows();
        let m_in = red.a_in.nrows();
        let n = red.free.len();
        let mut ws = WorkingSet::empty(red);
        for &id in ids {
            if id < m_eq {
                continue;
            } else if id < m_eq + m_in {
                ws.ineq[id - m_eq] = true;
            } else if id < m_eq + m_in + n {
                ws.upper[id - m_eq - m_in] = true;
            } else {
                ws.lower[id - m_eq - m_in - n] = true;
            }
        }
        ws
    }
}
