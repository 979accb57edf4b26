//! Derivative of the projection and the partial Jacobians of the projected
//! pseudo-gradient step `h_i(c, y_i, σ) = Proj[y_i − γ F_i(c, y_i, σ)]`.

use nalgebra::{DMatrix, DVector};

use super::{Polyhedron, ProjectionResult};
use crate::agents::Game;
use crate::error::{Error, Result};
use crate::linalg::{max_abs, RankRevealingQr};

/// Relative rank tolerance of the QR that spans the active rows.
pub const JACOBIAN_RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveSetTolerances {
    /// A constraint is active when its slack is at most `slack_rel · (1 + ‖b‖∞)`.
    pub slack_rel: f64,
    /// Active constraints with multiplier at most this are weakly active.
    pub dual: f64,
}

impl Default for ActiveSetTolerances {
    fn default() -> Self {
        Self { slack_rel: 1e-6, dual: 1e-6 }
    }
}

/// Inequality and box constraints classified at a projection result.
/// Weakly active constraints are kept in the active lists.
#[derive(Debug, Clone, PartialEq)]
pub struct ActiveSet {
    pub ineq: Vec<usize>,
    /// Free coordinates at their upper bound.
    pub upper: Vec<usize>,
    /// Free coordinates at their lower bound.
    pub lower: Vec<usize>,
    pub slack_tol: f64,
    pub dual_tol: f64,
    /// Active constraints whose multiplier is at most `dual_tol`.
    pub weakly_active: usize,
    /// Smallest slack among inactive constraints (infinite if none).
    pub min_inactive_slack: f64,
    /// Smallest multiplier among active constraints (infinite if none).
    pub min_active_dual: f64,
}

impl ActiveSet {
    pub fn classify(poly: &Polyhedron, result: &ProjectionResult, tols: &ActiveSetTolerances) -> Self {
        let free = poly.free();
        let b_scale = max_abs(poly.b_in())
            .max(free.iter().fold(0.0f64, |m, &k| m.max(poly.lower()[k].abs()).max(poly.upper()[k].abs())));
        let slack_tol = tols.slack_rel * (1.0 + b_scale);
        let y = &result.point;
        let mut set = ActiveSet {
            ineq: Vec::new(),
            upper: Vec::new(),
            lower: Vec::new(),
            slack_tol,
            dual_tol: tols.dual,
            weakly_active: 0,
            min_inactive_slack: f64::INFINITY,
            min_active_dual: f64::INFINITY,
        };
        let record = |active: bool, slack: f64, dual: f64, set: &mut ActiveSet| {
            if active {
                set.min_active_dual = set.min_active_dual.min(dual);
                if dual <= tols.dual {
                    set.weakly_active += 1;
                }
            } else {
                set.min_inactive_slack = set.min_inactive_slack.min(slack);
            }
        };
        let ay = poly.a_in() * y;
        for r in 0..ay.len() {
            let slack = poly.b_in()[r] - ay[r];
            let active = slack <= slack_tol;
            if active {
                set.ineq.push(r);
            }
            record(active, slack, result.ineq_duals[r], &mut set);
        }
        for &k in free {
            let up = poly.upper()[k] - y[k];
            let lo = y[k] - poly.lower()[k];
            if up <= slack_tol && up <= lo {
                set.upper.push(k);
                record(true, up, result.upper_duals[k], &mut set);
                record(false, lo, 0.0, &mut set);
            } else if lo <= slack_tol {
                set.lower.push(k);
                record(true, lo, result.lower_duals[k], &mut set);
                record(false, up, 0.0, &mut set);
            } else {
                record(false, up, 0.0, &mut set);
                record(false, lo, 0.0, &mut set);
            }
        }
        set
    }

    /// Every active multiplier exceeds `10 · dual_tol` and every inactive slack `10 · slack_tol`.
    pub fn is_strict(&self) -> bool {
        self.min_active_dual > 10.0 * self.dual_tol && self.min_inactive_slack > 10.0 * self.slack_tol
    }
}

/// `D = I − Eᵀ(EEᵀ)⁺E` for the equality rows stacked with the active rows,
/// stored as the interior coordinates and an orthonormal basis of the
/// active normals restricted to them.
#[derive(Debug, Clone)]
pub struct ProjectionJacobian {
    n: usize,
    interior: Vec<usize>,
    basis: DMatrix<f64>,
}

pub fn projection_jacobian(
    poly: &Polyhedron,
    result: &ProjectionResult,
    active: &ActiveSet,
) -> Result<ProjectionJacobian> {
    let n = poly.dim();
    if result.point.len() != n {
        return Err(Error::Dimension(format!("result has {} entries, polyhedron {n}", result.point.len())));
    }
    let mut on_face = vec![false; n];
    for &k in poly.pinned().iter().chain(&active.upper).chain(&active.lower) {
        on_face[k] = true;
    }
    let interior: Vec<usize> = (0..n).filter(|&k| !on_face[k]).collect();
    let mut rows: Vec<DVector<f64>> = Vec::new();
    let eq_int = poly.a_eq().select_columns(&interior);
    let in_int = poly.a_in().select_columns(&interior);
    for r in 0..eq_int.nrows() {
        rows.push(eq_int.row(r).transpose());
    }
    for &r in &active.ineq {
        rows.push(in_int.row(r).transpose());
    }
    rows.retain(|v| v.iter().any(|x| *x != 0.0));
    let basis = if rows.is_empty() || interior.is_empty() {
        DMatrix::zeros(interior.len(), 0)
    } else {
        let et = DMatrix::from_columns(&rows);
        let qr = RankRevealingQr::new(&et, JACOBIAN_RANK_TOL)
            .map_err(|_| Error::NumericalRank { condition: f64::INFINITY })?;
        qr.range_basis()
    };
    Ok(ProjectionJacobian { n, interior, basis })
}

impl ProjectionJacobian {
    /// The identity, i.e. the derivative at an interior point with no equality rows.
    pub fn identity(n: usize) -> Self {
        Self { n, interior: (0..n).collect(), basis: DMatrix::zeros(n, 0) }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Rank of `D`, the dimension of the tangent space of the active face.
    pub fn rank(&self) -> usize {
        self.interior.len() - self.basis.ncols()
    }

    pub fn interior(&self) -> &[usize] {
        &self.interior
    }

    /// `D x` for a block of columns.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n, x.ncols());
        if self.interior.is_empty() {
            return out;
        }
        let xi = x.select_rows(&self.interior);
        let t = if self.basis.ncols() == 0 { xi } else { &xi - &self.basis * (self.basis.transpose() * &xi) };
        for (i, &k) in self.interior.iter().enumerate() {
            out.row_mut(k).copy_from(&t.row(i));
        }
        out
    }

    pub fn apply_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        let m = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
        self.apply(&m).column(0).into_owned()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        self.apply(&DMatrix::identity(self.n, self.n))
    }
}

/// Partial Jacobians of `h_i` for one agent: `S₁ = D(−γ ∂F_i/∂c)`,
/// `S₂ = D(I − γ ∂F_i/∂y_i)`, `S₃ = D(−γ ∂F_i/∂σ)`.
///
/// `F_i` is affine, so its partials are constant; only `D` depends on the point.
#[derive(Debug, Clone)]
pub struct StepJacobians {
    pub agent: usize,
    pub gamma: f64,
    pub d: ProjectionJacobian,
}

pub fn step_jacobians(game: &Game, agent: usize, gamma: f64, d: ProjectionJacobian) -> Result<StepJacobians> {
    if agent >= game.n_agents() {
        return Err(Error::Dimension(format!("agent {agent} out of range")));
    }
    if d.dim() != game.layout().dim() {
        return Err(Error::Dimension(format!(
            "projection Jacobian has dimension {}, strategies {}",
            d.dim(),
            game.layout().dim()
        )));
    }
    Ok(StepJacobians { agent, gamma, d })
}

impl StepJacobians {
    /// `S₂ s + S₃ σ_s + S₁`, evaluated without forming the dense matrices.
    pub fn propagate(&self, game: &Game, s: &DMatrix<f64>, sigma_s: &DMatrix<f64>) -> DMatrix<f64> {
        let i = self.agent;
        let mut inner = game.own_jacobian_apply(i, s);
        inner += game.sigma_jacobian_apply(i, sigma_s);
        for (row, col, v) in game.discount_jacobian_entries(i) {
            inner[(row, col)] += v;
        }
        let step = s - inner * self.gamma;
        self.d.apply(&step)
    }

    pub fn s1(&self, game: &Game) -> DMatrix<f64> {
        self.d.apply(&(game.discount_jacobian(self.agent) * -self.gamma))
    }

    pub fn s2(&self, game: &Game) -> DMatrix<f64> {
        let n = game.layout().dim();
        self.d.apply(&(DMatrix::identity(n, n) - game.own_jacobian(self.agent) * self.gamma))
    }

    pub fn s3(&self, game: &Game) -> DMatrix<f64> {
        self.d.apply(&(game.sigma_jacobian(self.agent) * -self.gamma))
    }
}
