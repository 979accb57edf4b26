//! Equilibrium certificates computed with an interior-point solver, independent
//! of the projection machinery used by the inner loop.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT};
use nalgebra::{DMatrix, DVector};

use crate::agents::Game;
use crate::error::{Error, Result};
use crate::projection::Polyhedron;

#[derive(Debug, Clone, PartialEq)]
pub struct AgentGap {
    /// `F_iᵀ(y_i − argmin_{x ∈ 𝒴_i} F_iᵀx)`.
    pub vi_gap: f64,
    /// `f_i(y_i, y_{−i}) − min_{x ∈ 𝒴_i} f_i(x, y_{−i})`.
    pub best_response_gap: f64,
    /// `‖F_i‖`, the scale the gaps are compared against.
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeCheck {
    pub is_equilibrium: bool,
    /// Largest gap relative to `1 + ‖F_i‖` over agents and both gap kinds.
    pub worst: f64,
    pub agents: Vec<AgentGap>,
}

/// Checks the variational and unilateral-deviation gaps of every agent.
/// A profile passes when every gap is at most `tol · (1 + ‖F_i‖)`.
pub fn verify_ne(game: &Game, c: &DVector<f64>, profile: &[DVector<f64>], tol: f64) -> Result<NeCheck> {
    let sigma = game.aggregate_flow(profile);
    let mut agents = Vec::with_capacity(game.n_agents());
    let mut worst = 0.0f64;
    for i in 0..game.n_agents() {
        let y = &profile[i];
        let f = game.agent_gradient(i, c, y, &sigma);
        let x_lp = linear_minimizer(game.polyhedron(i), &f)?;
        let vi_gap = f.dot(&(y - &x_lp));
        let (_, best_cost) = best_response(game, i, c, profile)?;
        let best_response_gap = game.agent_cost(i, c, y, &sigma) - best_cost;
        let gradient_norm = f.norm();
        worst = worst.max(vi_gap.max(best_response_gap) / (1.0 + gradient_norm));
        agents.push(AgentGap { vi_gap, best_response_gap, gradient_norm });
    }
    Ok(NeCheck { is_equilibrium: worst <= tol, worst, agents })
}

/// A minimizer of `fᵀx` over the polyhedron.
pub fn linear_minimizer(poly: &Polyhedron, f: &DVector<f64>) -> Result<DVector<f64>> {
    let n = poly.dim();
    solve_qp(poly, &DMatrix::zeros(n, n), f)
}

/// Agent `i`'s best response to the other agents in `profile` and its cost.
///
/// `f_i` is a convex quadratic in `y_i`: its Hessian is `∂F_i/∂y_i` plus the
/// self-congestion term `P_i ∂F_i/∂σ` on the φ columns.
pub fn best_response(game: &Game, i: usize, c: &DVector<f64>, profile: &[DVector<f64>]) -> Result<(DVector<f64>, f64)> {
    let l = game.layout();
    let p = game.agent(i).population;
    let y = &profile[i];
    let sigma = game.aggregate_flow(profile);
    let mut h = game.own_jacobian(i);
    let sj = game.sigma_jacobian(i);
    for e in 0..l.n_edges {
        let col = sj.column(e) * p;
        let mut target = h.column_mut(l.phi(e));
        target += col;
    }
    let h = (&h + h.transpose()) * 0.5;
    let q = game.agent_gradient(i, c, y, &sigma) - &h * y;
    let x = solve_qp(game.polyhedron(i), &h, &q)?;
    let mut sigma_x = sigma.clone();
    for e in 0..l.n_edges {
        sigma_x[e] += p * (x[l.phi(e)] - y[l.phi(e)]);
    }
    let cost = game.agent_cost(i, c, &x, &sigma_x);
    Ok((x, cost))
}

/// `min ½xᵀHx + qᵀx` over the polyhedron.
fn solve_qp(poly: &Polyhedron, h: &DMatrix<f64>, q: &DVector<f64>) -> Result<DVector<f64>> {
    let n = poly.dim();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut b = Vec::new();
    for r in 0..poly.a_eq().nrows() {
        rows.push(sparse_row(&poly.a_eq().row(r).transpose()));
        b.push(poly.b_eq()[r]);
    }
    for &k in poly.pinned() {
        rows.push(vec![(k, 1.0)]);
        b.push(poly.lower()[k]);
    }
    let n_zero = rows.len();
    for r in 0..poly.a_in().nrows() {
        rows.push(sparse_row(&poly.a_in().row(r).transpose()));
        b.push(poly.b_in()[r]);
    }
    for &k in poly.free() {
        rows.push(vec![(k, 1.0)]);
        b.push(poly.upper()[k]);
        rows.push(vec![(k, -1.0)]);
        b.push(-poly.lower()[k]);
    }
    let n_nonneg = rows.len() - n_zero;
    let a = csc_from_rows(&rows, n);
    let p = csc_upper(h);
    let cones = [SupportedConeT::ZeroConeT(n_zero), SupportedConeT::NonnegativeConeT(n_nonneg)];
    let settings = DefaultSettings::<f64> {
        verbose: false,
        tol_gap_abs: 1e-10,
        tol_gap_rel: 1e-10,
        tol_feas: 1e-10,
        ..Default::default()
    };
    let mut solver =
        DefaultSolver::new(&p, q.as_slice(), &a, &b, &cones, settings).map_err(|e| Error::Oracle(format!("{e:?}")))?;
    solver.solve();
    match solver.solution.status {
        SolverStatus::Solved | SolverStatus::AlmostSolved => Ok(DVector::from_vec(solver.solution.x.clone())),
        status => Err(Error::Oracle(format!("interior-point solve ended with {status:?}"))),
    }
}

fn sparse_row(v: &DVector<f64>) -> Vec<(usize, f64)> {
    v.iter().enumerate().filter(|(_, x)| **x != 0.0).map(|(k, x)| (k, *x)).collect()
}

fn csc_from_rows(rows: &[Vec<(usize, f64)>], n: usize) -> CscMatrix<f64> {
    let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    for (r, row) in rows.iter().enumerate() {
        for &(k, v) in row {
            cols[k].push((r, v));
        }
    }
    build_csc(rows.len(), n, cols)
}

fn csc_upper(h: &DMatrix<f64>) -> CscMatrix<f64> {
    let n = h.ncols();
    let cols = (0..n).map(|j| (0..=j).filter(|&i| h[(i, j)] != 0.0).map(|i| (i, h[(i, j)])).collect()).collect();
    build_csc(n, n, cols)
}

fn build_csc(m: usize, n: usize, cols: Vec<Vec<(usize, f64)>>) -> CscMatrix<f64> {
    let mut colptr = vec![0];
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    for col in cols {
        for (r, v) in col {
            rowval.push(r);
            nzval.push(v);
        }
        colptr.push(rowval.len());
    }
    CscMatrix::new(m, n, colptr, rowval, nzval)
}
