//! Inner fixed-point loop: projected pseudo-gradient iterations for the Nash
//! equilibrium together with the recursion for its sensitivity `∂y/∂c`.

mod verify;

pub use verify::{best_response, linear_minimizer, verify_ne, AgentGap, NeCheck};

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::agents::Game;
use crate::error::{Error, Result};
use crate::projection::{
    project_warm, projection_jacobian, step_jacobians, ActiveSet, ActiveSetTolerances, ProjectionResult,
    ProjectionSettings, ProjectionWorkspace, StepJacobians,
};

/// Consecutive residual increases tolerated before the loop reports divergence.
pub const DIVERGENCE_WINDOW: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct InnerSettings {
    /// Stop when both residuals are at or below this.
    pub tol: f64,
    /// Threshold of the Jacobian freeze; defaults to `tol`.
    pub freeze_tol: Option<f64>,
    pub gamma: f64,
    pub max_iters: usize,
    /// Propagate the sensitivity alongside the strategies.
    pub sensitivity: bool,
    /// Record one [`TraceRow`] per iteration.
    pub trace: bool,
    pub divergence_window: usize,
    pub projection: ProjectionSettings,
    pub active_set: ActiveSetTolerances,
}

impl InnerSettings {
    pub fn new(gamma: f64, tol: f64) -> Self {
        Self {
            tol,
            freeze_tol: None,
            gamma,
            max_iters: 100_000,
            sensitivity: true,
            trace: false,
            divergence_window: DIVERGENCE_WINDOW,
            projection: ProjectionSettings::default(),
            active_set: ActiveSetTolerances::default(),
        }
    }

    /// The step from the game's monotonicity certificate, see
    /// [`MonotonicityReport::default_gamma`](crate::agents::MonotonicityReport::default_gamma).
    pub fn for_game(game: &Game, tol: f64) -> Result<Self> {
        let cert = game.monotonicity_certificate();
        let gamma = cert.default_gamma().ok_or_else(|| {
            Error::Config(format!(
                "no step size certified (φ-block min eigenvalue {:.3e}); set gamma explicitly",
                cert.phi_block_min
            ))
        })?;
        Ok(Self::new(gamma, tol))
    }

    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config(format!("tolerance must be non-negative, got {}", self.tol)));
        }
        Ok(())
    }
}

/// Iterates carried between calls: strategies, sensitivities and the
/// per-agent projection workspaces.
#[derive(Debug, Clone)]
pub struct InnerState {
    pub profile: Vec<DVector<f64>>,
    pub sensitivity: Vec<DMatrix<f64>>,
    workspaces: Vec<ProjectionWorkspace>,
}

impl InnerState {
    pub fn new(game: &Game, profile: Vec<DVector<f64>>, sensitivity: Vec<DMatrix<f64>>) -> Result<Self> {
        let n = game.layout().dim();
        let m = game.discount_layout().dim();
        if profile.len() != game.n_agents() || sensitivity.len() != game.n_agents() {
            return Err(Error::Dimension(format!(
                "{} strategies and {} sensitivity blocks for {} agents",
                profile.len(),
                sensitivity.len(),
                game.n_agents()
            )));
        }
        if let Some(y) = profile.iter().find(|y| y.len() != n) {
            return Err(Error::Dimension(format!("strategy has {} entries, expected {n}", y.len())));
        }
        if let Some(s) = sensitivity.iter().find(|s| s.shape() != (n, m)) {
            return Err(Error::Dimension(format!("sensitivity block is {:?}, expected {:?}", s.shape(), (n, m))));
        }
        let workspaces = vec![ProjectionWorkspace::new(); profile.len()];
        Ok(Self { profile, sensitivity, workspaces })
    }

    /// Per-agent projection of the all-½ point and zero sensitivities.
    pub fn start(game: &Game) -> Result<Self> {
        let zeros = Self::zero_sensitivity(game);
        Self::new(game, game.default_start()?, zeros)
    }

    pub fn from_profile(game: &Game, profile: Vec<DVector<f64>>) -> Result<Self> {
        let zeros = Self::zero_sensitivity(game);
        Self::new(game, profile, zeros)
    }

    fn zero_sensitivity(game: &Game) -> Vec<DMatrix<f64>> {
        let shape = (game.layout().dim(), game.discount_layout().dim());
        vec![DMatrix::zeros(shape.0, shape.1); game.n_agents()]
    }

    /// The stacked strategy vector.
    pub fn stacked(&self) -> DVector<f64> {
        stack(&self.profile)
    }
}

/// One row of the iteration trace.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub residual_y: f64,
    pub residual_s: f64,
    /// Whether the step Jacobians were refreshed in this iteration.
    pub zeta: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InnerReport {
    pub iterations: usize,
    pub residual_y: f64,
    pub residual_s: f64,
    pub converged: bool,
    /// Number of iterations in which the step Jacobians were recomputed.
    pub jacobian_refreshes: usize,
    pub wall_time: Duration,
    /// Sum over iterations of the slowest agent's update time.
    pub max_agent_time: Duration,
    pub trace: Vec<TraceRow>,
}

impl InnerReport {
    pub fn residual(&self) -> f64 {
        self.residual_y.max(self.residual_s)
    }

    /// Mean per-iteration time of the slowest agent.
    pub fn mean_max_agent_time(&self) -> Duration {
        if self.iterations == 0 {
            Duration::ZERO
        } else {
            self.max_agent_time / self.iterations as u32
        }
    }
}

struct AgentUpdate {
    point: DVector<f64>,
    result: ProjectionResult,
    elapsed: Duration,
}

/// Runs `y_i ← Proj[y_i − γ F_i(c, σ(y))]` for every agent and the sensitivity
/// recursion `s_i ← S₂ᵢ s_i + S₃ᵢ σ(s) + S₁ᵢ` until both residuals drop to
/// `settings.tol` or `max_iters` is reached.
///
/// The step Jacobians are computed at the first iteration and then refreshed
/// only while `‖y^{ℓ+1} − y^ℓ‖ ≥ freeze_tol`; afterwards they stay frozen.
/// Agents are updated in parallel on the current rayon pool; aggregates are
/// summed in agent order, so results do not depend on the thread count.
pub fn inner_loop(
    game: &Game,
    c: &DVector<f64>,
    state: &mut InnerState,
    settings: &InnerSettings,
) -> Result<InnerReport> {
    settings.validate()?;
    if c.len() != game.discount_layout().dim() {
        return Err(Error::Dimension(format!("{} discounts, expected {}", c.len(), game.discount_layout().dim())));
    }
    let start = Instant::now();
    let freeze_tol = settings.freeze_tol.unwrap_or(settings.tol);
    let gamma = settings.gamma;
    let mut report = InnerReport {
        iterations: 0,
        residual_y: f64::INFINITY,
        residual_s: if settings.sensitivity { f64::INFINITY } else { 0.0 },
        converged: false,
        jacobian_refreshes: 0,
        wall_time: Duration::ZERO,
        max_agent_time: Duration::ZERO,
        trace: Vec::new(),
    };
    if game.n_agents() == 0 {
        report.residual_y = 0.0;
        report.residual_s = 0.0;
        report.converged = true;
        return Ok(report);
    }

    let mut steps: Vec<Option<StepJacobians>> = vec![None; game.n_agents()];
    let mut last = f64::INFINITY;
    let mut growth = 0usize;

    for iteration in 0..settings.max_iters {
        let sigma = game.aggregate_flow(&state.profile);
        let updates: Vec<AgentUpdate> = state
            .workspaces
            .par_iter_mut()
            .zip(state.profile.par_iter())
            .enumerate()
            .map(|(i, (ws, y))| {
                let t0 = Instant::now();
                let f = game.agent_gradient(i, c, y, &sigma);
                let z = y - f * gamma;
                let result = project_warm(game.polyhedron(i), &z, ws, &settings.projection)?;
                Ok(AgentUpdate { point: result.point.clone(), result, elapsed: t0.elapsed() })
            })
            .collect::<Result<_>>()?;

        let residual_y =
            updates.iter().zip(&state.profile).map(|(u, y)| (&u.point - y).norm_squared()).sum::<f64>().sqrt();
        let zeta = iteration == 0 || residual_y >= freeze_tol;

        let mut residual_s = 0.0;
        let mut slowest = updates.iter().map(|u| u.elapsed).max().unwrap_or_default();
        if settings.sensitivity {
            let sigma_s = game.aggregate_sensitivity(&state.sensitivity);
            let new_sens: Vec<(Option<StepJacobians>, DMatrix<f64>, Duration)> = updates
                .par_iter()
                .zip(steps.par_iter())
                .zip(state.sensitivity.par_iter())
                .enumerate()
                .map(|(i, ((u, step), s))| {
                    let t0 = Instant::now();
                    let fresh = if zeta || step.is_none() {
                        let poly = game.polyhedron(i);
                        let active = ActiveSet::classify(poly, &u.result, &settings.active_set);
                        let d = projection_jacobian(poly, &u.result, &active)?;
                        Some(step_jacobians(game, i, gamma, d)?)
                    } else {
                        None
                    };
                    let current = fresh.as_ref().or(step.as_ref()).expect("step Jacobians present");
                    let next = current.propagate(game, s, &sigma_s);
                    Ok((fresh, next, t0.elapsed()))
                })
                .collect::<Result<_>>()?;
            if zeta {
                report.jacobian_refreshes += 1;
            }
            let mut sq = 0.0;
            for (i, ((fresh, next, elapsed), u)) in new_sens.into_iter().zip(&updates).enumerate() {
                if let Some(f) = fresh {
                    steps[i] = Some(f);
                }
                sq += (&next - &state.sensitivity[i]).norm_squared();
                state.sensitivity[i] = next;
                slowest = slowest.max(u.elapsed + elapsed);
            }
            residual_s = sq.sqrt();
        }
        for (y, u) in state.profile.iter_mut().zip(updates) {
            *y = u.point;
        }

        report.iterations = iteration + 1;
        report.residual_y = residual_y;
        report.residual_s = residual_s;
        report.max_agent_time += slowest;
        if settings.trace {
            report.trace.push(TraceRow { iteration, residual_y, residual_s, zeta });
        }

        let residual = residual_y.max(residual_s);
        if !residual.is_finite() {
            return Err(Error::Divergence { iteration, residual });
        }
        if residual <= settings.tol {
            report.converged = true;
            break;
        }
        growth = if residual > last { growth + 1 } else { 0 };
        if growth >= settings.divergence_window {
            return Err(Error::Divergence { iteration, residual });
        }
        last = residual;
    }
    report.wall_time = start.elapsed();
    if !report.converged {
        log::warn!(
            "inner loop stopped at {} iterations with residual {:.3e} (tolerance {:.1e})",
            report.iterations,
            report.residual(),
            settings.tol
        );
    }
    Ok(report)
}

/// Solves for the equilibrium at `c` without tracking the sensitivity.
pub fn solve_equilibrium(
    game: &Game,
    c: &DVector<f64>,
    state: &mut InnerState,
    gamma: f64,
    tol: f64,
) -> Result<InnerReport> {
    let mut settings = InnerSettings::new(gamma, tol);
    settings.sensitivity = false;
    inner_loop(game, c, state, &settings)
}

/// `max_i ‖s_i − (S₂ᵢ s_i + S₃ᵢ σ(s) + S₁ᵢ)‖_F` with the step Jacobians
/// evaluated at the current profile.
pub fn sensitivity_fixed_point_residual(
    game: &Game,
    c: &DVector<f64>,
    state: &InnerState,
    gamma: f64,
    tols: &ActiveSetTolerances,
) -> Result<f64> {
    let sigma = game.aggregate_flow(&state.profile);
    let sigma_s = game.aggregate_sensitivity(&state.sensitivity);
    let settings = ProjectionSettings::default();
    let mut worst = 0.0f64;
    for i in 0..game.n_agents() {
        let y = &state.profile[i];
        let z = y - game.agent_gradient(i, c, y, &sigma) * gamma;
        let result = crate::projection::project(game.polyhedron(i), &z, &settings)?;
        let active = ActiveSet::classify(game.polyhedron(i), &result, tols);
        let d = projection_jacobian(game.polyhedron(i), &result, &active)?;
        let step = step_jacobians(game, i, gamma, d)?;
        let next = step.propagate(game, &state.sensitivity[i], &sigma_s);
        worst = worst.max((next - &state.sensitivity[i]).norm());
    }
    Ok(worst)
}

pub(crate) fn stack(blocks: &[DVector<f64>]) -> DVector<f64> {
    let n: usize = blocks.iter().map(|b| b.len()).sum();
    DVector::from_iterator(n, blocks.iter().flat_map(|b| b.iter().copied()))
}

/// Stacks per-agent sensitivity blocks vertically into `∂y/∂c`.
pub fn stack_sensitivity(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols = blocks.first().map_or(0, |b| b.ncols());
    let mut out = DMatrix::zeros(rows, cols);
    let mut r = 0;
    for b in blocks {
        out.view_mut((r, 0), b.shape()).copy_from(b);
        r += b.nrows();
    }
    out
}

#[cfg(test)]
mod tests;
