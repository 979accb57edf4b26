//! The nine acceptance checks, shared by the `validate` subcommand and the
//! acceptance test target. Each check builds its own seeded instances.

use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::experiments::{baseline, compare_uniform, fit_exponent, scale_bench, sweep_budget, ScaleOptions};
use super::oracles::{brute_force_ne, fd_gradient, fd_sensitivity, BruteForceOptions};
use super::scenario::{
    demo_scenario, generate_scenario, AgentSpec, Decongestion, NetworkSource, Scenario, ScenarioSpec,
    SyntheticNetworkSpec, TaSpec,
};
use crate::agents::{last_mile_weights, AgentClass, AgentKind, FacilityPrices, Game};
use crate::equilibrium::{inner_loop, InnerSettings, InnerState};
use crate::error::Result;
use crate::incentives::{
    hypergradient, implicit_objective, outer_loop, ta_objective, ta_partials, validate_schedules, DiscountMode,
    Objective, OuterOptions, Schedules, TaProblem,
};
use crate::network::{Edge, RoadNetwork};
use crate::projection::{project, projection_jacobian, ActiveSet, ActiveSetTolerances, Polyhedron, ProjectionSettings};

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionOutcome {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub elapsed: Duration,
    /// Wall-time limit of the check, if any.
    pub limit: Option<Duration>,
}

impl std::fmt::Display for CriterionOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "criterion {} {:<28} {} ({:.1}s) {}",
            self.id,
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.elapsed.as_secs_f64(),
            self.detail
        )
    }
}

pub const CRITERIA: [(u8, &str); 9] = [
    (1, "gradient correctness"),
    (2, "equilibrium and uniqueness"),
    (3, "sensitivity correctness"),
    (4, "projection jacobian"),
    (5, "hypergradient end-to-end"),
    (6, "budget compliance"),
    (7, "congestion demo trends"),
    (8, "schedule gate"),
    (9, "scalability"),
];

/// Runs the selected checks (all when `ids` is empty) in order.
pub fn run_criteria(ids: &[u8]) -> Vec<CriterionOutcome> {
    CRITERIA.iter().filter(|(id, _)| ids.is_empty() || ids.contains(id)).map(|&(id, name)| run_one(id, name)).collect()
}

fn run_one(id: u8, name: &'static str) -> CriterionOutcome {
    let limit = match id {
        1 => Some(10),
        2 => Some(60),
        3 => Some(120),
        5 => Some(300),
        7 => Some(600),
        9 => Some(900),
        _ => None,
    }
    .map(Duration::from_secs);
    let start = Instant::now();
    let result = match id {
        1 => gradient_check(),
        2 => equilibrium_check(),
        3 => sensitivity_check(),
        4 => projection_check(),
        5 => hypergradient_check(),
        6 => budget_check(),
        7 => demo_check(),
        8 => schedule_check(),
        9 => scalability_check(),
        _ => unreachable!("unknown criterion {id}"),
    };
    let elapsed = start.elapsed();
    let (mut passed, mut detail) = match result {
        Ok(c) => (c.passed, c.detail),
        Err(e) => (false, format!("error: {e}")),
    };
    if let Some(l) = limit {
        if elapsed > l {
            passed = false;
            detail.push_str(&format!("; exceeded the {}s limit", l.as_secs()));
        }
    }
    CriterionOutcome { id, name, passed, detail, elapsed, limit }
}

struct Check {
    passed: bool,
    detail: String,
}

impl Check {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self { passed, detail: detail.into() }
    }
}

/// A small synthetic scenario with desk-scale populations.
pub fn small_spec(seed: u64, nodes: usize, chords: usize, n_pev: usize, n_fv: usize) -> ScenarioSpec {
    ScenarioSpec {
        seed,
        network: NetworkSource::Synthetic(SyntheticNetworkSpec {
            nodes,
            chords_per_node: chords,
            n_charge: 1,
            n_park: 2,
            ..SyntheticNetworkSpec::default()
        }),
        agents: AgentSpec { n_pev, n_fv, n_vehicles: 100.0, ..AgentSpec::default() },
        ta: TaSpec { budget: 10.0, decongestion: Decongestion::All, ..TaSpec::default() },
        ..ScenarioSpec::default()
    }
}

fn random_profile(game: &Game, rng: &mut ChaCha8Rng) -> Result<Vec<DVector<f64>>> {
    let settings = ProjectionSettings::default();
    (0..game.n_agents())
        .map(|i| {
            let poly = game.polyhedron(i);
            let z = DVector::from_fn(poly.dim(), |_, _| rng.gen_range(-0.2..1.2));
            Ok(project(poly, &z, &settings)?.point)
        })
        .collect()
}

fn random_discounts(caps: &DVector<f64>, rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> DVector<f64> {
    caps.map(|cap| cap * rng.gen_range(lo..hi))
}

fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).amax() / (1.0 + b.amax())
}

fn replace(profile: &[DVector<f64>], i: usize, y: &DVector<f64>) -> Vec<DVector<f64>> {
    let mut p = profile.to_vec();
    p[i] = y.clone();
    p
}

fn gradient_check() -> Result<Check> {
    let mut worst_pg = 0.0f64;
    let mut worst_ta = 0.0f64;
    let mut points = 0;
    for seed in 1..=3u64 {
        let scenario = generate_scenario(&small_spec(seed, 5, 1, 2, 2), None)?;
        let game = &scenario.game;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        for _ in 0..20 {
            points += 1;
            let profile = random_profile(game, &mut rng)?;
            let c = random_discounts(&scenario.problem.caps, &mut rng, 0.0, 1.0);
            let sigma = game.aggregate_flow(&profile);
            for i in 0..game.n_agents() {
                let g = game.agent_gradient(i, &c, &profile[i], &sigma);
                let f = |y: &DVector<f64>| game.agent_cost(i, &c, y, &game.aggregate_flow(&replace(&profile, i, y)));
                worst_pg = worst_pg.max(rel_err(&fd_gradient(f, &profile[i], 1e-5), &g));
            }
            for objective in [Objective::Ttt, Objective::Revenue] {
                let mut problem = scenario.problem.clone();
                problem.objective = objective;
                // Half the unconstrained spend keeps the penalty active at most points.
                problem.budget = 0.5 * crate::incentives::budget_spend(game, &c, &profile);
                let (d_c, d_y) = ta_partials(game, &c, &profile, &problem);
                let fc = |x: &DVector<f64>| ta_objective(game, x, &profile, &problem);
                worst_ta = worst_ta.max(rel_err(&fd_gradient(fc, &c, 1e-6), &d_c));
                for (i, dy) in d_y.iter().enumerate() {
                    let fy = |y: &DVector<f64>| ta_objective(game, &c, &replace(&profile, i, y), &problem);
                    worst_ta = worst_ta.max(rel_err(&fd_gradient(fy, &profile[i], 1e-6), dy));
                }
            }
        }
    }
    let tol = 1e-5;
    Ok(Check::new(
        worst_pg <= tol && worst_ta <= tol,
        format!("{points} points; pseudo-gradient rel err {worst_pg:.1e}, authority partials {worst_ta:.1e} (tol {tol:.0e})"),
    ))
}

fn tight_solve(
    game: &Game,
    c: &DVector<f64>,
    start: Vec<DVector<f64>>,
    gamma: f64,
    tol: f64,
    sensitivity: bool,
) -> Result<(InnerState, bool)> {
    let mut state = InnerState::from_profile(game, start)?;
    let mut settings = InnerSettings::new(gamma, tol);
    settings.sensitivity = sensitivity;
    settings.max_iters = 1_000_000;
    let report = inner_loop(game, c, &mut state, &settings)?;
    Ok((state, report.converged))
}

fn max_diff(a: &[DVector<f64>], b: &[DVector<f64>]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).amax()).fold(0.0, f64::max)
}

/// Seeded instances with total dimension at most 60 and a positive certificate.
fn certified_small(count: usize, first_seed: u64) -> Result<Vec<Scenario>> {
    let mut out = Vec::new();
    let mut seed = first_seed;
    while out.len() < count && seed < first_seed + 200 {
        let s = generate_scenario(&small_spec(seed, 4, 0, 1, 2), None)?;
        seed += 1;
        if s.game.total_dim() <= 60 && s.game.monotonicity_certificate().min_eigenvalue > 0.0 {
            out.push(s);
        }
    }
    Ok(out)
}

fn equilibrium_check() -> Result<Check> {
    let scenarios = certified_small(5, 10)?;
    let mut worst_oracle = 0.0f64;
    let mut worst_restart = 0.0f64;
    let mut all_converged = true;
    for (k, s) in scenarios.iter().enumerate() {
        let game = &s.game;
        let mut rng = ChaCha8Rng::seed_from_u64(200 + k as u64);
        let c = random_discounts(&s.problem.caps, &mut rng, 0.0, 1.0);
        let oracle = brute_force_ne(game, &c, &BruteForceOptions::default())?;
        let mut solutions = Vec::new();
        for r in 0..10 {
            let start = if r == 0 { game.default_start()? } else { random_profile(game, &mut rng)? };
            let (state, converged) = tight_solve(game, &c, start, s.gamma, 1e-12, false)?;
            all_converged &= converged;
            solutions.push(state.profile);
        }
        worst_oracle = worst_oracle.max(max_diff(&solutions[0], &oracle.profile));
        for a in 0..solutions.len() {
            for b in a + 1..solutions.len() {
                worst_restart = worst_restart.max(max_diff(&solutions[a], &solutions[b]));
            }
        }
    }
    Ok(Check::new(
        scenarios.len() == 5 && all_converged && worst_oracle <= 1e-6 && worst_restart <= 1e-5,
        format!(
            "{} instances; oracle gap {worst_oracle:.1e} (tol 1e-6), restart spread {worst_restart:.1e} (tol 1e-5){}",
            scenarios.len(),
            if all_converged { "" } else { "; an inner solve did not converge" }
        ),
    ))
}

fn sensitivity_check() -> Result<Check> {
    let mut checked = 0;
    let mut tried = 0;
    let mut worst = 0.0f64;
    let mut scale = 0.0f64;
    let mut seed = 30u64;
    while checked < 3 && tried < 40 {
        tried += 1;
        let mut spec = small_spec(seed, 4, 1, 1, 2);
        spec.agents.n_vehicles = 2000.0;
        let s = generate_scenario(&spec, None)?;
        seed += 1;
        let game = &s.game;
        if game.monotonicity_certificate().min_eigenvalue <= 0.0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_discounts(&s.problem.caps, &mut rng, 0.2, 0.8);
        let (state, converged) = tight_solve(game, &c, game.default_start()?, s.gamma, 1e-12, true)?;
        if !converged {
            continue;
        }
        let fd = fd_sensitivity(game, &c, &state.profile, s.gamma, 1e-4, 1e-13)?;
        // A vertex equilibrium has zero sensitivity and tests nothing.
        if fd.one_sided_gap > 1e-6 || fd.central.iter().all(|b| b.amax() < 1e-3) {
            continue;
        }
        for (a, b) in state.sensitivity.iter().zip(&fd.central) {
            worst = worst.max((a - b).amax());
            scale = scale.max(b.amax());
        }
        checked += 1;
    }
    Ok(Check::new(
        checked == 3 && worst <= 1e-4 && scale > 0.0,
        format!("{checked} smooth configurations of {tried} tried; max abs error {worst:.1e} (tol 1e-4), largest entry {scale:.1e}"),
    ))
}

fn projection_check() -> Result<Check> {
    let settings = ProjectionSettings::default();
    let mut polys: Vec<Polyhedron> = Vec::new();
    for seed in 40..43u64 {
        let s = generate_scenario(&small_spec(seed, 5, 1, 2, 2), None)?;
        polys.extend((0..s.game.n_agents()).map(|i| s.game.polyhedron(i).clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_sym = 0.0f64;
    let mut worst_idem = 0.0f64;
    let mut worst_fd = 0.0f64;
    let mut strict = 0;
    let mut samples = 0;
    for _ in 0..25 {
        for poly in &polys {
            samples += 1;
            let n = poly.dim();
            let z = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..2.0));
            let res = project(poly, &z, &settings)?;
            let act = ActiveSet::classify(poly, &res, &ActiveSetTolerances::default());
            let d = projection_jacobian(poly, &res, &act)?.to_dense();
            worst_sym = worst_sym.max((&d - d.transpose()).amax());
            worst_idem = worst_idem.max((&d * &d - &d).amax());
            if !act.is_strict() || strict >= 40 {
                continue;
            }
            strict += 1;
            let h = 1e-6;
            let mut fd = DMatrix::zeros(n, n);
            let mut zp = z.clone();
            for k in 0..n {
                zp[k] = z[k] + h;
                let plus = project(poly, &zp, &settings)?.point;
                zp[k] = z[k] - h;
                let minus = project(poly, &zp, &settings)?.point;
                zp[k] = z[k];
                fd.set_column(k, &((plus - minus) / (2.0 * h)));
            }
            worst_fd = worst_fd.max((fd - d).amax());
        }
    }
    let mut worst_expansion = f64::NEG_INFINITY;
    for k in 0..1000 {
        let poly = &polys[k % polys.len()];
        let z1 = DVector::from_fn(poly.dim(), |_, _| rng.gen_range(-1.0..2.0));
        let z2 = DVector::from_fn(poly.dim(), |_, _| rng.gen_range(-1.0..2.0));
        let p1 = project(poly, &z1, &settings)?.point;
        let p2 = project(poly, &z2, &settings)?.point;
        worst_expansion = worst_expansion.max((&p1 - &p2).norm() - (&z1 - &z2).norm());
    }
    Ok(Check::new(
        worst_sym <= 1e-8 && worst_idem <= 1e-8 && strict >= 10 && worst_fd <= 1e-5 && worst_expansion <= 1e-9,
        format!(
            "{samples} points: asymmetry {worst_sym:.1e}, idempotency {worst_idem:.1e}; {strict} strict points FD err {worst_fd:.1e}; \
             1000 pairs worst expansion {worst_expansion:.1e}"
        ),
    ))
}

/// One fuel-vehicle class choosing between a lot on the way (node 1) and the
/// destination lot (node 2); the authority targets the direct road.
pub fn two_lot_instance() -> Result<Scenario> {
    let e = |tail: usize, head: usize, a: f64, b: f64, h: f64| Edge { tail, head, a, b, h, virtual_edge: false };
    let edges = vec![
        e(0, 1, 0.10, 0.01, 1.0),
        e(1, 2, 0.10, 0.01, 1.0),
        e(0, 2, 0.12, 0.02, 5.0),
        e(2, 0, 0.20, 0.01, 0.0),
        e(1, 0, 0.10, 0.01, 0.0),
        e(2, 1, 0.10, 0.01, 0.0),
    ];
    let network = RoadNetwork::new(vec![1, 2, 3], edges, vec![], vec![1, 2])?;
    let weights = last_mile_weights(&network, 2, 0.05);
    let agent = AgentClass {
        kind: AgentKind::Fv,
        population: 5.0,
        origin: 0,
        destination: 2,
        value_of_time: 10.0,
        energy_demand: 0.0,
        min_charge_fraction: 0.0,
        charge_slots: vec![],
        park_slots: vec![5.0, 5.0],
        last_mile_weights: weights,
    };
    let game = Game::new(network, vec![agent], FacilityPrices { charge: vec![], park: vec![3.0, 4.0] })?;
    let theta = TaProblem::fractions(&game, 0.5, 0.8);
    let problem = TaProblem::new(&game, vec![2], 6.0, 10.0, &theta, Objective::Ttt, DiscountMode::Personalized)?;
    let gamma = game.contraction_step().map(|s| s.gamma).unwrap_or(1e-2);
    Ok(Scenario { game, problem, schedules: Schedules::default(), gamma, solver: Default::default() })
}

fn hypergradient_check() -> Result<Check> {
    let s = two_lot_instance()?;
    let game = &s.game;
    let problem = &s.problem;
    let tol = 1e-12;

    let c = problem.caps.map(|cap| 0.4 * cap);
    let (state, _) = tight_solve(game, &c, game.default_start()?, s.gamma, tol, true)?;
    let g = hypergradient(game, &c, &state.profile, &state.sensitivity, problem);
    let warm = state.profile.clone();
    let implicit = |x: &DVector<f64>| {
        let mut st = InnerState::from_profile(game, warm.clone()).expect("feasible start");
        implicit_objective(game, problem, x, &mut st, s.gamma, tol).unwrap_or(f64::NAN)
    };
    let fd = fd_gradient(implicit, &c, 1e-5);
    let hg_err = (&g - &fd).amax() / fd.amax().max(1e-12);

    let n = 101;
    let mut grid_min = f64::INFINITY;
    let mut st = InnerState::start(game)?;
    for a in 0..n {
        for b in 0..n {
            let x = DVector::from_vec(vec![
                problem.caps[0] * a as f64 / (n - 1) as f64,
                problem.caps[1] * b as f64 / (n - 1) as f64,
            ]);
            grid_min = grid_min.min(implicit_objective(game, problem, &x, &mut st, s.gamma, 1e-11)?);
        }
    }
    let mut state = InnerState::start(game)?;
    let report = outer_loop(game, problem, &s.schedules, &DVector::zeros(2), &mut state, &OuterOptions::new(s.gamma))?;
    let mut st = InnerState::start(game)?;
    let final_value = implicit_objective(game, problem, &report.discounts, &mut st, s.gamma, 1e-11)?;
    let gap = (final_value - grid_min) / grid_min.abs().max(1e-12);
    Ok(Check::new(
        fd.amax() > 0.0 && hg_err <= 1e-3 && gap <= 0.01,
        format!(
            "hypergradient rel err {hg_err:.1e} (tol 1e-3); outer {final_value:.6} vs grid {grid_min:.6} ({:+.3}% , tol 1%)",
            100.0 * gap
        ),
    ))
}

fn budget_check() -> Result<Check> {
    let mut lines = Vec::new();
    let mut ok = true;
    let mut binding = 0;
    for seed in 60..64u64 {
        let mut spec = small_spec(seed, 5, 1, 2, 2);
        spec.agents.n_vehicles = 1000.0;
        spec.ta.budget = 1e6;
        let free = generate_scenario(&spec, None)?;
        let unconstrained = crate::incentives::solve_with_budget(
            &free.game,
            &free.problem,
            &free.schedules,
            &free.zero_discounts(),
            &free.outer_options(),
        )?;
        // Half of what the authority would spend without a budget.
        let mut problem = free.problem.clone();
        problem.budget = 0.5 * unconstrained.spend;
        let s = free.with_problem(problem);
        // Start from the caps, far over budget, with a weak penalty.
        let s = s.with_problem(s.problem.with_mu(1e-2));
        let report = crate::incentives::solve_with_budget(
            &s.game,
            &s.problem,
            &s.schedules,
            &s.problem.caps,
            &s.outer_options(),
        )?;
        if unconstrained.spend > 0.0 {
            binding += 1;
        }
        ok &= report.spend <= s.problem.budget * (1.0 + 1e-3);
        lines.push(format!(
            "seed {seed}: spend {:.3} / budget {:.3} (unconstrained {:.3}, mu doubled {}x)",
            report.spend, s.problem.budget, unconstrained.spend, report.mu_doublings
        ));
    }
    Ok(Check::new(ok && binding >= 3, lines.join("; ")))
}

pub const DEMO_BUDGETS: [f64; 5] = [0.0, 5.0, 10.0, 20.0, 40.0];

fn demo_check() -> Result<Check> {
    let s = demo_scenario()?;
    let (_, base) = baseline(&s)?;
    let rows: Vec<_> = sweep_budget(&s, &DEMO_BUDGETS)?.into_iter().map(|r| r.row).collect();
    let strict = rows.iter().filter(|r| r.budget > 0.0).all(|r| r.ttt_final < base);
    let monotone = rows.windows(2).all(|w| w[1].reduction_pct >= w[0].reduction_pct - 1e-9);
    let (u, p) = compare_uniform(&s)?;
    let dominates = p.row.reduction_pct >= u.row.reduction_pct - 0.1;
    let sweep: Vec<String> = rows.iter().map(|r| format!("{}:{:.2}%", r.budget, r.reduction_pct)).collect();
    Ok(Check::new(
        strict && monotone && dominates,
        format!(
            "sweep [{}]; personalized {:.2}% vs uniform {:.2}% at budget {}",
            sweep.join(" "),
            p.row.reduction_pct,
            u.row.reduction_pct,
            s.problem.budget
        ),
    ))
}

fn schedule_check() -> Result<Check> {
    let family = |p: f64, q: f64| Schedules { alpha0: Some(1.0), p, sigma0: 1e-4, q, sigma_floor: 0.0 };
    let accepts = validate_schedules(&family(1.0, 0.5)).is_empty();
    let rejects_slow = [0.0, 0.5, 1.0, 2.0].iter().all(|&q| !validate_schedules(&family(0.4, q)).is_empty());
    let rejects_constant = !validate_schedules(&family(1.0, 0.0)).is_empty();
    Ok(Check::new(
        accepts && rejects_slow && rejects_constant,
        format!("accepts (1, 0.5): {accepts}; rejects (0.4, ·): {rejects_slow}; rejects (1, 0): {rejects_constant}"),
    ))
}

/// Agents and prices used by the scalability check.
pub fn scale_spec() -> ScenarioSpec {
    ScenarioSpec {
        agents: AgentSpec { n_pev: 2, n_fv: 2, n_vehicles: 1000.0, ..AgentSpec::default() },
        ..ScenarioSpec::default()
    }
}

fn scalability_check() -> Result<Check> {
    let rows = scale_bench(&scale_spec(), &ScaleOptions::default(), 9)?;
    let x: Vec<f64> = rows.iter().map(|r| r.n_nodes as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.inner_iteration_time).collect();
    let exponent = fit_exponent(&x, &y);
    let times: Vec<String> =
        rows.iter().map(|r| format!("n_v={}: {:.2e}s", r.n_nodes, r.inner_iteration_time)).collect();
    Ok(Check::new(
        exponent.is_some_and(|e| e < 3.0),
        format!("{}; fit exponent {}", times.join(", "), exponent.map_or("n/a".into(), |e| format!("{e:.2}"))),
    ))
}
