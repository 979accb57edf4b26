//! Experiment drivers: single solves, budget sweeps, uniform comparison and
//! timing studies, with CSV emission.

use std::io::Write;
use std::time::{Duration, Instant};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{
    assemble, generate_agents, synthetic_network, Decongestion, Scenario, ScenarioSpec, SyntheticNetworkSpec,
};
use crate::equilibrium::{inner_loop, solve_equilibrium, InnerSettings, InnerState};
use crate::error::{Error, Result};
use crate::incentives::{budget_spend, outer_loop, solve_with_budget, ttt, DiscountMode, OuterRow, SolveReport};

/// One solved budget level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentRow {
    pub budget: f64,
    pub mode: DiscountMode,
    pub ttt_baseline: f64,
    pub ttt_final: f64,
    pub reduction_pct: f64,
    pub spend: f64,
    pub wall_time: f64,
}

impl ExperimentRow {
    fn new(
        budget: f64,
        mode: DiscountMode,
        ttt_baseline: f64,
        ttt_final: f64,
        spend: f64,
        wall_time: Duration,
    ) -> Self {
        let reduction_pct = if ttt_baseline > 0.0 { 100.0 * (ttt_baseline - ttt_final) / ttt_baseline } else { 0.0 };
        Self { budget, mode, ttt_baseline, ttt_final, reduction_pct, spend, wall_time: wall_time.as_secs_f64() }
    }
}

/// Per-iteration trace of an outer run, without the discount vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceCsvRow {
    pub k: usize,
    pub objective: f64,
    pub ttt: f64,
    pub spend: f64,
    pub hypergradient_norm: f64,
    pub alpha: f64,
    pub step: f64,
    pub inner_iterations: usize,
    pub inner_residual: f64,
}

impl From<&OuterRow> for TraceCsvRow {
    fn from(r: &OuterRow) -> Self {
        Self {
            k: r.k,
            objective: r.objective,
            ttt: r.ttt,
            spend: r.spend,
            hypergradient_norm: r.hypergradient_norm,
            alpha: r.alpha,
            step: r.step,
            inner_iterations: r.inner_iterations,
            inner_residual: r.inner_residual,
        }
    }
}

/// Outcome of one budget-constrained solve.
#[derive(Debug, Clone)]
pub struct Solved {
    pub row: ExperimentRow,
    pub report: SolveReport,
    /// Discounts of the reported point; see [`solve_scenario`].
    pub discounts: DVector<f64>,
}

/// Equilibrium without discounts and its travel time on the targeted edges.
pub fn baseline(scenario: &Scenario) -> Result<(InnerState, f64)> {
    let c = scenario.zero_discounts();
    let state = equilibrium_at(scenario, &c, None)?;
    let sigma = scenario.game.aggregate_flow(&state.profile);
    let t = ttt(&scenario.game, &sigma, &scenario.problem.decongestion_edges);
    Ok((state, t))
}

fn equilibrium_at(scenario: &Scenario, c: &DVector<f64>, start: Option<&InnerState>) -> Result<InnerState> {
    let mut state = match start {
        Some(s) => s.clone(),
        None => InnerState::start(&scenario.game)?,
    };
    let report = solve_equilibrium(&scenario.game, c, &mut state, scenario.gamma, 1e-10)?;
    if !report.converged {
        log::warn!("equilibrium evaluation stopped at residual {:.3e}", report.residual());
    }
    Ok(state)
}

/// Solves the authority problem from `c0` with penalty doubling, then reports
/// the within-budget point of least travel time among the start, the outer
/// iterates and the final discounts, each re-evaluated at a tight equilibrium.
pub fn solve_scenario(scenario: &Scenario, c0: &DVector<f64>, ttt_baseline: f64) -> Result<Solved> {
    let start = Instant::now();
    let game = &scenario.game;
    let problem = &scenario.problem;
    let report = solve_with_budget(game, problem, &scenario.schedules, c0, &scenario.outer_options())?;
    let limit = problem.budget * (1.0 + scenario.solver.budget_slack);

    let mut candidates: Vec<DVector<f64>> = vec![c0.clone()];
    candidates.extend(report.rows.iter().filter(|r| r.spend <= limit).map(|r| r.discounts.clone()));
    candidates.push(report.discounts.clone());
    let warm = InnerState::from_profile(game, report.profile.clone())?;

    let mut best: Option<(f64, f64, DVector<f64>)> = None;
    let mut evaluated: Vec<(f64, f64, DVector<f64>)> = Vec::new();
    for c in candidates {
        if evaluated.iter().any(|(_, _, e)| *e == c) {
            continue;
        }
        let state = equilibrium_at(scenario, &c, Some(&warm))?;
        let spend = budget_spend(game, &c, &state.profile);
        let t = ttt(game, &game.aggregate_flow(&state.profile), &problem.decongestion_edges);
        evaluated.push((t, spend, c.clone()));
        if spend <= limit && best.as_ref().is_none_or(|(bt, _, _)| t < *bt) {
            best = Some((t, spend, c));
        }
    }
    let (t, spend, discounts) = match best {
        Some(b) => b,
        None => {
            log::warn!("no evaluated point is within budget; reporting the final iterate");
            evaluated.pop().expect("final iterate evaluated")
        }
    };
    let row = ExperimentRow::new(problem.budget, problem.mode, ttt_baseline, t, spend, start.elapsed());
    Ok(Solved { row, report, discounts })
}

/// Solves every budget in ascending order, warm-starting each level from the
/// previous level's discounts.
pub fn sweep_budget(scenario: &Scenario, budgets: &[f64]) -> Result<Vec<Solved>> {
    let mut sorted = budgets.to_vec();
    if sorted.iter().any(|b| !(*b >= 0.0 && b.is_finite())) {
        return Err(Error::Config("budgets must be finite and non-negative".into()));
    }
    sorted.sort_by(f64::total_cmp);
    let (_, base) = baseline(scenario)?;
    let mut c = scenario.zero_discounts();
    let mut out = Vec::with_capacity(sorted.len());
    for budget in sorted {
        let mut problem = scenario.problem.clone();
        problem.budget = budget;
        let solved = solve_scenario(&scenario.with_problem(problem), &c, base)?;
        c = solved.discounts.clone();
        out.push(solved);
    }
    Ok(out)
}

/// Solves the uniform problem from zero, then the personalized problem from
/// the uniform optimum. Returns `(uniform, personalized)`.
pub fn compare_uniform(scenario: &Scenario) -> Result<(Solved, Solved)> {
    let (_, base) = baseline(scenario)?;
    let mut uniform = scenario.problem.clone();
    uniform.mode = DiscountMode::Uniform;
    let u = solve_scenario(&scenario.with_problem(uniform), &scenario.zero_discounts(), base)?;
    let mut personalized = scenario.problem.clone();
    personalized.mode = DiscountMode::Personalized;
    let p = solve_scenario(&scenario.with_problem(personalized), &u.discounts, base)?;
    Ok((u, p))
}

/// Timing of one network size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleRow {
    pub n_nodes: usize,
    pub n_edges: usize,
    pub n_agents: usize,
    /// Strategy dimension of one agent.
    pub agent_dim: usize,
    /// Mean over inner iterations of the slowest agent's update time (seconds).
    pub inner_iteration_time: f64,
    /// Mean wall time of one outer iteration (seconds).
    pub outer_step_time: f64,
    pub inner_iterations: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScaleOptions {
    pub sizes: Vec<usize>,
    /// Inner iterations timed per size.
    pub inner_iterations: usize,
    /// Outer iterations timed per size.
    pub outer_iterations: usize,
    pub network: SyntheticNetworkSpec,
}

impl Default for ScaleOptions {
    fn default() -> Self {
        Self {
            sizes: vec![25, 50, 100],
            inner_iterations: 20,
            outer_iterations: 2,
            network: SyntheticNetworkSpec {
                chords_per_node: 2,
                n_charge: 3,
                n_park: 5,
                ..SyntheticNetworkSpec::default()
            },
        }
    }
}

/// Times inner iterations and outer steps on synthetic networks of growing size.
/// Agents, prices and the authority setup come from `spec`; the network
/// settings from `options`.
pub fn scale_bench(spec: &ScenarioSpec, options: &ScaleOptions, seed: u64) -> Result<Vec<ScaleRow>> {
    let mut rows = Vec::with_capacity(options.sizes.len());
    for &n in &options.sizes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ n as u64);
        let net_spec = SyntheticNetworkSpec { nodes: n, ..options.network.clone() };
        let network = synthetic_network(&net_spec, &mut rng)?;
        let agents = generate_agents(&spec.agents, &network, &mut rng)?;
        let mut local = spec.clone();
        local.ta.decongestion = Decongestion::All;
        let scenario = assemble(&local, network, agents)?;
        let game = &scenario.game;

        let c = scenario.zero_discounts();
        let mut state = InnerState::start(game)?;
        let mut settings = InnerSettings::new(scenario.gamma, 1e-300);
        settings.max_iters = options.inner_iterations;
        // Refresh the step Jacobians every iteration: the worst-case cost.
        settings.freeze_tol = Some(0.0);
        let inner = inner_loop(game, &c, &mut state, &settings)?;

        let mut outer = scenario.outer_options();
        outer.max_outer = options.outer_iterations;
        outer.max_inner_iters = options.inner_iterations;
        let mut schedules = scenario.schedules;
        schedules.alpha0 = Some(schedules.alpha0.unwrap_or(1e-3));
        let t0 = Instant::now();
        let report = outer_loop(game, &scenario.problem, &schedules, &c, &mut state, &outer)?;
        let outer_time = t0.elapsed().as_secs_f64() / report.rows.len().max(1) as f64;

        rows.push(ScaleRow {
            n_nodes: game.network().n_nodes(),
            n_edges: game.network().n_edges(),
            n_agents: game.n_agents(),
            agent_dim: game.layout().dim(),
            inner_iteration_time: inner.mean_max_agent_time().as_secs_f64(),
            outer_step_time: outer_time,
            inner_iterations: inner.iterations,
        });
    }
    Ok(rows)
}

/// Least-squares slope of `log y` against `log x`.
pub fn fit_exponent(x: &[f64], y: &[f64]) -> Option<f64> {
    let pts: Vec<(f64, f64)> =
        x.iter().zip(y).filter(|(a, b)| **a > 0.0 && **b > 0.0).map(|(a, b)| (a.ln(), b.ln())).collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// Writes serializable rows as CSV with a header line.
pub fn write_csv<T: Serialize, W: Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    w.flush()?;
    Ok(())
}
