//! Scenario configuration and generation, verification oracles, experiment
//! drivers and the criterion checks behind `validate`.

mod experiments;
mod oracles;
mod scenario;
mod validation;

pub use experiments::{
    baseline, compare_uniform, fit_exponent, scale_bench, solve_scenario, sweep_budget, write_csv, ExperimentRow,
    ScaleOptions, ScaleRow, Solved, TraceCsvRow,
};
pub use oracles::{brute_force_ne, fd_gradient, fd_sensitivity, BruteForceNe, BruteForceOptions, FdSensitivity};
pub use scenario::{
    demo_network, demo_scenario, demo_spec, generate_agents, generate_scenario, select_gamma, synthetic_network,
    AgentSpec, Decongestion, GammaRule, NetworkSource, PriceSpec, Scenario, ScenarioSpec, SolverSpec,
    SyntheticNetworkSpec, TaSpec, TntpSource,
};
pub use validation::{
    run_criteria, scale_spec, small_spec, two_lot_instance, CriterionOutcome, CRITERIA, DEMO_BUDGETS,
};
