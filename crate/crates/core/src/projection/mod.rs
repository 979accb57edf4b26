//! Euclidean projection onto polyhedra and its derivative.
//!
//! `project` solves `min ½‖y − z‖²` over `{A_eq y = b_eq, A_in y ≤ b_in, lo ≤ y ≤ hi}`.
//! Coordinates with `lo == hi` are eliminated up front. The reduced problem is
//! solved by an operator-splitting iteration and then polished with a
//! primal-dual active-set loop that solves the KKT system of the guessed
//! active set exactly. When polishing cannot certify optimality an exact
//! dual active-set method takes over.

mod admm;
mod dual_active_set;
mod jacobian;
mod polish;

use nalgebra::{DMatrix, DVector};

pub use jacobian::{
    projection_jacobian, step_jacobians, ActiveSet, ActiveSetTolerances, ProjectionJacobian, StepJacobians,
};

use crate::error::{Error, Result};
use crate::linalg::max_abs;
use admm::AdmmState;
use polish::{Solution, WorkingSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionSettings {
    /// Feasibility and stationarity tolerance of the returned point.
    pub tol: f64,
    /// Over-relaxation of the splitting iteration, in (0, 2).
    pub relaxation: f64,
    /// Stopping tolerance of the first splitting phase.
    pub admm_tol: f64,
    pub max_admm_iter: usize,
    pub max_polish_rounds: usize,
}

impl Default for ProjectionSettings {
    fn default() -> Self {
        Self { tol: 1e-9, relaxation: 1.6, admm_tol: 1e-6, max_admm_iter: 4000, max_polish_rounds: 60 }
    }
}

/// `{y : A_eq y = b_eq, A_in y <= b_in, lower <= y <= upper}`.
#[derive(Debug, Clone)]
pub struct Polyhedron {
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
    a_in: DMatrix<f64>,
    b_in: DVector<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    reduced: Reduced,
}

/// The problem restricted to coordinates that are not pinned by `lower == upper`.
#[derive(Debug, Clone)]
struct Reduced {
    free: Vec<usize>,
    fixed: Vec<usize>,
    /// Equality rows that still touch a free coordinate.
    eq_rows: Vec<usize>,
    a_eq: DMatrix<f64>,
    b_eq: DVector<f64>,
    a_in: DMatrix<f64>,
    b_in: DVector<f64>,
    lower: DVector<f64>,
    upper: DVector<f64>,
    admm: admm::Factorization,
}

impl Polyhedron {
    pub fn new(
        a_eq: DMatrix<f64>,
        b_eq: DVector<f64>,
        a_in: DMatrix<f64>,
        b_in: DVector<f64>,
        lower: DVector<f64>,
        upper: DVector<f64>,
    ) -> Result<Self> {
        let n = lower.len();
        if upper.len() != n || a_eq.ncols() != n || a_in.ncols() != n {
            return Err(Error::Dimension(format!(
                "polyhedron columns: lower {}, upper {}, A_eq {}, A_in {}",
                n,
                upper.len(),
                a_eq.ncols(),
                a_in.ncols()
            )));
        }
        if a_eq.nrows() != b_eq.len() || a_in.nrows() != b_in.len() {
            return Err(Error::Dimension("polyhedron right-hand sides".into()));
        }
        if let Some(k) = (0..n).find(|&k| !(lower[k] <= upper[k])) {
            return Err(Error::Validation(format!("box bounds cross at coordinate {k}: [{}, {}]", lower[k], upper[k])));
        }
        let reduced = Reduced::build(&a_eq, &b_eq, &a_in, &b_in, &lower, &upper)?;
        let poly = Self { a_eq, b_eq, a_in, b_in, lower, upper, reduced };
        // Certify non-emptiness with a feasible point.
        let start = DVector::from_fn(n, |k, _| 0.5 * (poly.lower[k] + poly.upper[k]));
        match project(&poly, &start, &ProjectionSettings::default()) {
            Ok(res) if poly.max_violation(&res.point) <= 1e-7 => Ok(poly),
            Ok(res) => Err(Error::Validation(format!(
                "polyhedron appears empty (closest point violates constraints by {:.3e})",
                poly.max_violation(&res.point)
            ))),
            Err(e) => Err(Error::Validation(format!("polyhedron appears empty: {e}"))),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn a_eq(&self) -> &DMatrix<f64> {
        &self.a_eq
    }

    pub fn b_eq(&self) -> &DVector<f64> {
        &self.b_eq
    }

    pub fn a_in(&self) -> &DMatrix<f64> {
        &self.a_in
    }

    pub fn b_in(&self) -> &DVector<f64> {
        &self.b_in
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    /// Coordinates pinned by `lower == upper`.
    pub fn pinned(&self) -> &[usize] {
        &self.reduced.fixed
    }

    pub fn free(&self) -> &[usize] {
        &self.reduced.free
    }

    /// Largest constraint violation of `y` (equalities, inequalities and box).
    pub fn max_violation(&self, y: &DVector<f64>) -> f64 {
        let eq = max_abs(&(&self.a_eq * y - &self.b_eq));
        let ineq = (&self.a_in * y - &self.b_in).iter().fold(0.0f64, |m, v| m.max(*v));
        let boxv = (0..y.len()).fold(0.0f64, |m, k| m.max(self.lower[k] - y[k]).max(y[k] - self.upper[k]));
        eq.max(ineq).max(boxv)
    }

    pub fn contains(&self, y: &DVector<f64>, tol: f64) -> bool {
        y.len() == self.dim() && self.max_violation(y) <= tol
    }
}

impl Reduced {
    fn build(
        a_eq: &DMatrix<f64>,
        b_eq: &DVector<f64>,
        a_in: &DMatrix<f64>,
        b_in: &DVector<f64>,
        lower: &DVector<f64>,
        upper: &DVector<f64>,
    ) -> Result<Self> {
        let n = lower.len();
        let free: Vec<usize> = (0..n).filter(|&k| lower[k] < upper[k]).collect();
        let fixed: Vec<usize> = (0..n).filter(|&k| lower[k] == upper[k]).collect();
        let fixed_vals = DVector::from_iterator(fixed.len(), fixed.iter().map(|&k| lower[k]));

        let shift = |a: &DMatrix<f64>, b: &DVector<f64>| -> DVector<f64> {
            if fixed.is_empty() {
                return b.clone();
            }
            b - a.select_columns(&fixed) * &fixed_vals
        };
        let a_eq_free = a_eq.select_columns(&free);
        let b_eq_shift = shift(a_eq, b_eq);
        let eq_rows: Vec<usize> = (0..a_eq.nrows()).filter(|&r| a_eq_free.row(r).iter().any(|v| *v != 0.0)).collect();
        for r in 0..a_eq.nrows() {
            if !eq_rows.contains(&r) && b_eq_shift[r].abs() > 1e-12 * (1.0 + b_eq[r].abs()) {
                return Err(Error::Validation(format!(
                    "equality row {r} has no free variable and is violated by {:.3e}",
                    b_eq_shift[r]
                )));
            }
        }
        let a_eq_r = a_eq_free.select_rows(&eq_rows);
        let b_eq_r = b_eq_shift.select_rows(&eq_rows);
        let a_in_r = a_in.select_columns(&free);
        let b_in_r = shift(a_in, b_in);
        let lower_r = lower.select_rows(&free);
        let upper_r = upper.select_rows(&free);
        let admm = admm::Factorization::new(&a_eq_r, &a_in_r)?;
        Ok(Self {
            free,
            fixed,
            eq_rows,
            a_eq: a_eq_r,
            b_eq: b_eq_r,
            a_in: a_in_r,
            b_in: b_in_r,
            lower: lower_r,
            upper: upper_r,
            admm,
        })
    }
}

/// Result of a projection with the KKT multipliers.
///
/// Stationarity reads `y − z + A_eqᵀ ν + A_inᵀ λ + μ_hi − μ_lo = 0` with
/// `λ, μ_hi, μ_lo ≥ 0`.
#[derive(Debug, Clone)]
pub struct ProjectionResult {
    pub point: DVector<f64>,
    pub eq_duals: DVector<f64>,
    pub ineq_duals: DVector<f64>,
    pub lower_duals: DVector<f64>,
    pub upper_duals: DVector<f64>,
    pub kkt_residual: f64,
}

/// Reusable per-agent state: the last active set and splitting iterates.
#[derive(Debug, Clone, Default)]
pub struct ProjectionWorkspace {
    working: Option<WorkingSet>,
    duals: Option<(DVector<f64>, DVector<f64>)>,
    admm: Option<AdmmState>,
}

impl ProjectionWorkspace {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Projects `z` onto `poly` from a cold start.
pub fn project(poly: &Polyhedron, z: &DVector<f64>, settings: &ProjectionSettings) -> Result<ProjectionResult> {
    let mut ws = ProjectionWorkspace::new();
    project_warm(poly, z, &mut ws, settings)
}

/// Projects `z` onto `poly`, reusing and updating the workspace.
pub fn project_warm(
    poly: &Polyhedron,
    z: &DVector<f64>,
    ws: &mut ProjectionWorkspace,
    settings: &ProjectionSettings,
) -> Result<ProjectionResult> {
    if z.len() != poly.dim() {
        return Err(Error::Dimension(format!("point has {} entries, polyhedron {}", z.len(), poly.dim())));
    }
    let red = &poly.reduced;
    let z_free = z.select_rows(&red.free);
    let scale = 1.0 + max_abs(&z_free).max(max_abs(&red.b_in)).max(max_abs(&red.b_eq));
    let tol = settings.tol * scale;

    // 1. Active-set solve from the previous working set and multipliers.
    if let Some(guess) = ws.working.clone() {
        let duals = ws.duals.clone();
        if let Some(sol) = polish::refine(red, &z_free, guess, duals, tol, settings.max_polish_rounds) {
            return Ok(finish(poly, z, ws, sol));
        }
    }

    // 2. Splitting phase, then polish from its active-set guess.
    let mut state = ws.admm.take().filter(|s| s.matches(red)).unwrap_or_else(|| AdmmState::zeros(red));
    let admm_tol = settings.admm_tol * scale;
    let residual = admm::solve(red, &z_free, &mut state, admm_tol, settings.max_admm_iter, settings);
    let guess = WorkingSet::from_admm(red, &state, admm_tol);
    let (y_eq, y_in, _) = admm::split_duals(red, &state);
    let polished = polish::refine(red, &z_free, guess, Some((y_eq, y_in)), tol, settings.max_polish_rounds);
    ws.admm = Some(state);
    if let Some(sol) = polished {
        return Ok(finish(poly, z, ws, sol));
    }
    log::trace!("polish failed after splitting (residual {residual:.3e}); using dual active-set solve");

    // 3. Exact dual active-set solve.
    match dual_active_set::solve(red, &z_free, tol) {
        Some(sol) => Ok(finish(poly, z, ws, sol)),
        None => Err(Error::Convergence { iterations: settings.max_admm_iter, residual }),
    }
}

fn finish(poly: &Polyhedron, z: &DVector<f64>, ws: &mut ProjectionWorkspace, sol: Solution) -> ProjectionResult {
    let res = assemble(poly, z, &sol.x, &sol);
    ws.duals = Some(sol.row_duals());
    ws.working = Some(sol.working);
    res
}

/// Expands a reduced solution to the full coordinate space and computes the KKT residual.
fn assemble(poly: &Polyhedron, z: &DVector<f64>, x_free: &DVector<f64>, sol: &Solution) -> ProjectionResult {
    let red = &poly.reduced;
    let n = poly.dim();
    let mut point = DVector::zeros(n);
    for (i, &k) in red.free.iter().enumerate() {
        point[k] = x_free[i];
    }
    for &k in &red.fixed {
        point[k] = poly.lower[k];
    }
    let mut eq_duals = DVector::zeros(poly.a_eq.nrows());
    for (i, &r) in red.eq_rows.iter().enumerate() {
        eq_duals[r] = sol.eq_duals[i];
    }
    let ineq_duals = sol.ineq_duals.clone();
    let mut lower_duals = DVector::zeros(n);
    let mut upper_duals = DVector::zeros(n);
    for (i, &k) in red.free.iter().enumerate() {
        lower_duals[k] = sol.lower_duals[i];
        upper_duals[k] = sol.upper_duals[i];
    }
    // Pinned coordinates absorb whatever stationarity leaves over.
    let grad = &point - z + poly.a_eq.transpose() * &eq_duals + poly.a_in.transpose() * &ineq_duals;
    for &k in &red.fixed {
        let m = -grad[k];
        if m >= 0.0 {
            upper_duals[k] = m;
        } else {
            lower_duals[k] = -m;
        }
    }
    let mut res = ProjectionResult { point, eq_duals, ineq_duals, lower_duals, upper_duals, kkt_residual: 0.0 };
    res.kkt_residual = kkt_residual(poly, z, &res);
    res
}

/// Max of primal infeasibility, stationarity error, dual sign violation and complementarity.
pub fn kkt_residual(poly: &Polyhedron, z: &DVector<f64>, res: &ProjectionResult) -> f64 {
    let y = &res.point;
    let primal = poly.max_violation(y);
    let stat = max_abs(
        &(y - z + poly.a_eq.transpose() * &res.eq_duals + poly.a_in.transpose() * &res.ineq_duals + &res.upper_duals
            - &res.lower_duals),
    );
    let sign = res
        .ineq_duals
        .iter()
        .chain(res.lower_duals.iter())
        .chain(res.upper_duals.iter())
        .fold(0.0f64, |m, v| m.max(-v));
    let slack_in = &poly.b_in - &poly.a_in * y;
    let mut comp = 0.0f64;
    for r in 0..slack_in.len() {
        comp = comp.max((res.ineq_duals[r] * slack_in[r]).abs());
    }
    for k in 0..y.len() {
        comp = comp.max((res.lower_duals[k] * (y[k] - poly.lower[k])).abs());
        comp = comp.max((res.upper_duals[k] * (poly.upper[k] - y[k])).abs());
    }
    primal.max(stat).max(sign).max(comp)
}
