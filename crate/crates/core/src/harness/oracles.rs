//! Verification oracles built from routes that do not share the inner
//! loop's fixed-point map or its sensitivity recursion.

use nalgebra::{DMatrix, DVector};

use crate::agents::Game;
use crate::equilibrium::{best_response, solve_equilibrium, stack, InnerState};
use crate::error::{Error, Result};
use crate::linalg::spectral_norm;
use crate::projection::{project_warm, ProjectionSettings, ProjectionWorkspace};

/// Central differences of `f` at `x` with step `h`.
pub fn fd_gradient(f: impl Fn(&DVector<f64>) -> f64, x: &DVector<f64>, h: f64) -> DVector<f64> {
    let mut g = DVector::zeros(x.len());
    let mut xp = x.clone();
    for k in 0..x.len() {
        xp[k] = x[k] + h;
        let fp = f(&xp);
        xp[k] = x[k] - h;
        let fm = f(&xp);
        xp[k] = x[k];
        g[k] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Finite-difference estimate of `∂y*/∂c`.
#[derive(Debug, Clone)]
pub struct FdSensitivity {
    /// Central differences per agent (`n_i × m` blocks).
    pub central: Vec<DMatrix<f64>>,
    /// Largest gap between forward and backward differences. The equilibrium
    /// map is piecewise affine, so a small gap certifies that no piece
    /// boundary lies within one step of `c`.
    pub one_sided_gap: f64,
}

/// Differences of `c ↦ y*(c)` with step `step`. Each evaluation solves the
/// equilibrium without sensitivity to `tol`, warm-started from `start`.
pub fn fd_sensitivity(
    game: &Game,
    c: &DVector<f64>,
    start: &[DVector<f64>],
    gamma: f64,
    step: f64,
    tol: f64,
) -> Result<FdSensitivity> {
    let m = c.len();
    let mut central: Vec<DMatrix<f64>> = start.iter().map(|y| DMatrix::zeros(y.len(), m)).collect();
    let solve = |point: &DVector<f64>| -> Result<Vec<DVector<f64>>> {
        let mut state = InnerState::from_profile(game, start.to_vec())?;
        let report = solve_equilibrium(game, point, &mut state, gamma, tol)?;
        if !report.converged {
            return Err(Error::Oracle(format!(
                "equilibrium not reached at a shifted point (residual {:.3e})",
                report.residual()
            )));
        }
        Ok(state.profile)
    };
    let mid = solve(c)?;
    let mut one_sided_gap = 0.0f64;
    let mut cp = c.clone();
    for k in 0..m {
        cp[k] = c[k] + step;
        let plus = solve(&cp)?;
        cp[k] = c[k] - step;
        let minus = solve(&cp)?;
        cp[k] = c[k];
        for (i, block) in central.iter_mut().enumerate() {
            block.set_column(k, &((&plus[i] - &minus[i]) / (2.0 * step)));
            let forward = (&plus[i] - &mid[i]) / step;
            let backward = (&mid[i] - &minus[i]) / step;
            one_sided_gap = one_sided_gap.max((forward - backward).amax());
        }
    }
    Ok(FdSensitivity { central, one_sided_gap })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BruteForceOptions {
    /// Natural-residual target `‖y − Proj(y − τF(y))‖∞`.
    pub tol: f64,
    pub max_iters: usize,
    /// Largest allowed move of any agent's best response at the result.
    pub best_response_tol: f64,
    pub max_dim: usize,
}

impl Default for BruteForceOptions {
    fn default() -> Self {
        Self { tol: 1e-9, max_iters: 500_000, best_response_tol: 1e-7, max_dim: 60 }
    }
}

#[derive(Debug, Clone)]
pub struct BruteForceNe {
    pub profile: Vec<DVector<f64>>,
    pub iterations: usize,
    pub residual: f64,
    /// Largest `‖BR_i(y_{−i}) − y_i‖∞` from the interior-point best responses.
    pub best_response_move: f64,
}

/// Solves the game's affine variational inequality by extragradient on the
/// stacked operator `F(y) = F(0) + J y` with the dense Jacobian, then
/// confirms the point with one round of interior-point best responses.
pub fn brute_force_ne(game: &Game, c: &DVector<f64>, options: &BruteForceOptions) -> Result<BruteForceNe> {
    let n = game.total_dim();
    if n > options.max_dim {
        return Err(Error::Oracle(format!("dimension {n} exceeds the oracle limit {}", options.max_dim)));
    }
    let na = game.n_agents();
    let dims: Vec<usize> = (0..na).map(|i| game.polyhedron(i).dim()).collect();
    let offsets: Vec<usize> = dims
        .iter()
        .scan(0, |acc, d| {
            let o = *acc;
            *acc += d;
            Some(o)
        })
        .collect();
    let zero: Vec<DVector<f64>> = dims.iter().map(|&d| DVector::zeros(d)).collect();
    let f0 = stack(&game.pseudo_gradient(c, &zero));
    let jac = game.full_jacobian();
    let lip = spectral_norm(&jac);
    let tau = if lip > 0.0 { 0.9 / lip } else { 1.0 };
    let settings = ProjectionSettings { tol: 1e-12, ..ProjectionSettings::default() };
    let mut workspaces = vec![ProjectionWorkspace::new(); na];

    let proj = |z: &DVector<f64>, ws: &mut [ProjectionWorkspace]| -> Result<DVector<f64>> {
        let mut out = DVector::zeros(n);
        for i in 0..na {
            let zi = z.rows(offsets[i], dims[i]).into_owned();
            let p = project_warm(game.polyhedron(i), &zi, &mut ws[i], &settings)?;
            out.rows_mut(offsets[i], dims[i]).copy_from(&p.point);
        }
        Ok(out)
    };

    let start = game.default_start()?;
    let mut y = stack(&start);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < options.max_iters {
        let fy = &f0 + &jac * &y;
        let half = proj(&(&y - &fy * tau), &mut workspaces)?;
        residual = (&y - &half).amax();
        if residual <= options.tol {
            break;
        }
        let fh = &f0 + &jac * &half;
        y = proj(&(&y - &fh * tau), &mut workspaces)?;
        iterations += 1;
    }
    if residual > options.tol {
        return Err(Error::Oracle(format!(
            "extragradient stalled at residual {residual:.3e} after {iterations} iterations"
        )));
    }

    let profile: Vec<DVector<f64>> = (0..na).map(|i| y.rows(offsets[i], dims[i]).into_owned()).collect();
    let mut best_response_move = 0.0f64;
    for i in 0..na {
        let (br, _) = best_response(game, i, c, &profile)?;
        best_response_move = best_response_move.max((&br - &profile[i]).amax());
    }
    if best_response_move > options.best_response_tol {
        return Err(Error::Oracle(format!(
            "best responses move by {best_response_move:.3e} at the extragradient point"
        )));
    }
    Ok(BruteForceNe { profile, iterations, residual, best_response_move })
}
