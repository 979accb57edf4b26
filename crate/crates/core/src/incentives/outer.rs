//! Projected hypergradient descent on the discounts.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};

use super::{
    budget_spend, hypergradient, project_discounts, ta_objective, ttt, validate_schedules, Schedules, TaProblem,
};
use crate::agents::Game;
use crate::equilibrium::{inner_loop, InnerSettings, InnerState};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct OuterOptions {
    /// Step of the inner projected pseudo-gradient iteration.
    pub gamma: f64,
    pub max_outer: usize,
    /// Stop when `‖c^{k+1} − c^k‖∞ ≤ step_tol · max cap`.
    pub step_tol: f64,
    pub max_inner_iters: usize,
    /// Reject schedules that fail [`validate_schedules`].
    pub check_schedules: bool,
    /// Accepted relative budget overrun before the penalty weight is doubled.
    pub budget_slack: f64,
    pub max_mu_doublings: usize,
    /// Halvings tried when the first step is chosen by backtracking.
    pub max_backtracks: usize,
}

impl OuterOptions {
    pub fn new(gamma: f64) -> Self {
        Self {
            gamma,
            max_outer: 500,
            step_tol: 1e-6,
            max_inner_iters: 100_000,
            check_schedules: true,
            budget_slack: 1e-3,
            max_mu_doublings: 40,
            max_backtracks: 40,
        }
    }

    fn inner(&self, tol: f64, sensitivity: bool) -> InnerSettings {
        let mut s = InnerSettings::new(self.gamma, tol);
        s.max_iters = self.max_inner_iters;
        s.sensitivity = sensitivity;
        s
    }
}

/// One outer iteration, evaluated at `(c^k, y^k)` before the update.
#[derive(Debug, Clone, PartialEq)]
pub struct OuterRow {
    pub k: usize,
    pub objective: f64,
    pub ttt: f64,
    pub spend: f64,
    pub hypergradient_norm: f64,
    pub alpha: f64,
    /// `‖c^{k+1} − c^k‖∞`.
    pub step: f64,
    /// Inner iterations spent computing `y^{k+1}`.
    pub inner_iterations: usize,
    pub inner_residual: f64,
    pub discounts: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct SolveReport {
    pub rows: Vec<OuterRow>,
    pub discounts: DVector<f64>,
    pub profile: Vec<DVector<f64>>,
    pub sensitivity: Vec<DMatrix<f64>>,
    pub objective: f64,
    pub ttt: f64,
    pub spend: f64,
    /// Penalty weight of the final run.
    pub mu: f64,
    pub mu_doublings: usize,
    /// The step criterion was met before `max_outer`.
    pub converged: bool,
    pub alpha0: f64,
    pub inner_iterations: usize,
    pub wall_time: Duration,
}

impl SolveReport {
    pub fn within_budget(&self, budget: f64, slack: f64) -> bool {
        self.spend <= budget * (1.0 + slack)
    }
}

/// Equilibrium objective `φ_TA(c, y*(c))`, solving the inner problem to `tol`
/// from the given state.
pub fn implicit_objective(
    game: &Game,
    problem: &TaProblem,
    c: &DVector<f64>,
    state: &mut InnerState,
    gamma: f64,
    tol: f64,
) -> Result<f64> {
    let mut settings = InnerSettings::new(gamma, tol);
    settings.sensitivity = false;
    inner_loop(game, c, state, &settings)?;
    Ok(ta_objective(game, c, &state.profile, problem))
}

/// Runs the hypergradient loop from `c0` with a fixed penalty weight.
///
/// Order per iteration: hypergradient at `(c^k, y^k, s^k)`, projected step to
/// `c^{k+1}`, then the inner loop at `c^{k+1}` warm-started from `y^k, s^k`
/// with tolerance `σ^k`. A bootstrap inner solve at `c⁰` supplies `y⁰, s⁰`.
pub fn outer_loop(
    game: &Game,
    problem: &TaProblem,
    schedules: &Schedules,
    c0: &DVector<f64>,
    state: &mut InnerState,
    options: &OuterOptions,
) -> Result<SolveReport> {
    problem.validate(game)?;
    if options.check_schedules {
        let violations = validate_schedules(schedules);
        if !violations.is_empty() {
            return Err(Error::Config(format!("invalid schedules: {}", violations.join("; "))));
        }
    }
    let layout = game.discount_layout();
    if c0.len() != layout.dim() {
        return Err(Error::Dimension(format!("{} discounts, expected {}", c0.len(), layout.dim())));
    }
    let start = Instant::now();
    let zero_budget = problem.budget == 0.0;
    let project = |c: &DVector<f64>| {
        if zero_budget {
            DVector::zeros(c.len())
        } else {
            project_discounts(c, &problem.caps, problem.mode, &layout)
        }
    };

    let mut c = project(c0);
    let boot = inner_loop(game, &c, state, &options.inner(schedules.sigma(0), true))?;
    let mut inner_total = boot.iterations;

    let alpha0 = match schedules.alpha0 {
        Some(a) => a,
        None => backtrack_alpha(game, problem, schedules, &c, state, options, &project)?,
    };

    let mut rows = Vec::new();
    let mut converged = false;
    let step_tol = options.step_tol * problem.max_cap();
    for k in 0..options.max_outer {
        let objective = ta_objective(game, &c, &state.profile, problem);
        let sigma = game.aggregate_flow(&state.profile);
        let g = hypergradient(game, &c, &state.profile, &state.sensitivity, problem);
        let alpha = schedules.alpha(alpha0, k);
        let next = project(&(&c - &g * alpha));
        let step = (&next - &c).amax();
        let inner = inner_loop(game, &next, state, &options.inner(schedules.sigma(k), true))?;
        inner_total += inner.iterations;
        rows.push(OuterRow {
            k,
            objective,
            ttt: ttt(game, &sigma, &problem.decongestion_edges),
            spend: budget_spend(game, &c, &state.profile),
            hypergradient_norm: g.norm(),
            alpha,
            step,
            inner_iterations: inner.iterations,
            inner_residual: inner.residual(),
            discounts: c.clone(),
        });
        c = next;
        if step <= step_tol {
            converged = true;
            break;
        }
    }

    let sigma = game.aggregate_flow(&state.profile);
    Ok(SolveReport {
        rows,
        objective: ta_objective(game, &c, &state.profile, problem),
        ttt: ttt(game, &sigma, &problem.decongestion_edges),
        spend: budget_spend(game, &c, &state.profile),
        discounts: c,
        profile: state.profile.clone(),
        sensitivity: state.sensitivity.clone(),
        mu: problem.mu,
        mu_doublings: 0,
        converged,
        alpha0,
        inner_iterations: inner_total,
        wall_time: start.elapsed(),
    })
}

/// Largest `α = α_max / 2^j` whose first projected step satisfies the
/// Armijo condition on the equilibrium objective. `α_max` moves the
/// coordinate with the largest hypergradient entry by one full cap.
fn backtrack_alpha(
    game: &Game,
    problem: &TaProblem,
    schedules: &Schedules,
    c: &DVector<f64>,
    state: &InnerState,
    options: &OuterOptions,
    project: &dyn Fn(&DVector<f64>) -> DVector<f64>,
) -> Result<f64> {
    let g = hypergradient(game, c, &state.profile, &state.sensitivity, problem);
    let g_max = g.amax();
    let cap = problem.max_cap();
    if g_max == 0.0 || cap == 0.0 {
        return Ok(1.0);
    }
    let phi0 = ta_objective(game, c, &state.profile, problem);
    let tol = schedules.sigma(0);
    let mut alpha = cap / g_max;
    for _ in 0..options.max_backtracks {
        let trial = project(&(c - &g * alpha));
        let mut s = state.clone();
        let phi = implicit_objective(game, problem, &trial, &mut s, options.gamma, tol)?;
        if phi <= phi0 - 1e-4 * g.dot(&(c - &trial)) {
            return Ok(alpha);
        }
        alpha *= 0.5;
    }
    Ok(alpha)
}

/// Runs [`outer_loop`] and doubles the penalty weight, restarting from the
/// last discounts, until the final spend is within `budget · (1 + slack)`.
pub fn solve_with_budget(
    game: &Game,
    problem: &TaProblem,
    schedules: &Schedules,
    c0: &DVector<f64>,
    options: &OuterOptions,
) -> Result<SolveReport> {
    let start = Instant::now();
    let mut state = InnerState::start(game)?;
    let mut c = c0.clone();
    let mut mu = problem.mu;
    let mut inner_total = 0;
    for round in 0..=options.max_mu_doublings {
        let mut report = outer_loop(game, &problem.with_mu(mu), schedules, &c, &mut state, options)?;
        inner_total += report.inner_iterations;
        if report.within_budget(problem.budget, options.budget_slack) || round == options.max_mu_doublings {
            if round == options.max_mu_doublings && !report.within_budget(problem.budget, options.budget_slack) {
                log::warn!("budget still exceeded after {round} penalty doublings (spend {:.3})", report.spend);
            }
            report.mu_doublings = round;
            report.inner_iterations = inner_total;
            report.wall_time = start.elapsed();
            return Ok(report);
        }
        log::info!("spend {:.3} exceeds budget {:.3}; doubling mu to {:.3e}", report.spend, problem.budget, 2.0 * mu);
        c = report.discounts;
        mu *= 2.0;
    }
    unreachable!("the last round always returns")
}
