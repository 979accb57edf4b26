//! End-to-end checks across modules: TNTP ingestion to scenario, equilibrium
//! and sensitivity against independent oracles, hypergradient against
//! differences of the implicit objective, and reproducibility.

use std::path::PathBuf;

use nalgebra::DVector;
use shaping_core::agents::{AgentClass, AgentKind, FacilityPrices, Game};
use shaping_core::equilibrium::{inner_loop, verify_ne, InnerSettings, InnerState};
use shaping_core::harness::{
    baseline, brute_force_ne, demo_scenario, fd_gradient, fd_sensitivity, generate_scenario, small_spec,
    solve_scenario, two_lot_instance, BruteForceOptions, NetworkSource, ScenarioSpec, TntpSource,
};
use shaping_core::incentives::{hypergradient, implicit_objective, outer_loop, OuterOptions, Schedules};
use shaping_core::network::{BuildOptions, Edge, ReferenceFlow, RoadNetwork};

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn tntp_spec() -> ScenarioSpec {
    let mut spec = small_spec(11, 6, 0, 2, 2);
    spec.network = NetworkSource::Tntp(TntpSource {
        net_path: data("ring6_net.tntp"),
        flow_path: Some(data("ring6_flow.tntp")),
        charge_ids: vec![3],
        park_ids: vec![4, 5],
        build: BuildOptions {
            reference_flow: ReferenceFlow::Capacity,
            time_scale: 1.0 / 60.0,
            ..BuildOptions::default()
        },
    });
    spec.agents.n_vehicles = 200.0;
    spec.agents.od_pairs = vec![(1, 4), (6, 5), (2, 5), (1, 5)];
    spec
}

#[test]
fn tntp_scenario_solves_to_a_verified_equilibrium() {
    let s = generate_scenario(&tntp_spec(), None).unwrap();
    assert_eq!(s.game.network().n_nodes(), 6);
    assert_eq!(s.game.network().n_edges(), 16);
    assert!(s.game.network().edges().iter().all(|e| e.a > 0.0 && e.b > 0.0 && e.h > 0.0));
    let c = s.problem.caps.map(|cap| 0.5 * cap);
    let mut state = InnerState::start(&s.game).unwrap();
    let mut settings = InnerSettings::new(s.gamma, 1e-11);
    settings.sensitivity = false;
    settings.max_iters = 500_000;
    assert!(inner_loop(&s.game, &c, &mut state, &settings).unwrap().converged);
    let check = verify_ne(&s.game, &c, &state.profile, 1e-6).unwrap();
    assert!(check.is_equilibrium, "worst gap {:.3e}", check.worst);
}

#[test]
fn missing_tntp_file_is_an_error() {
    let mut spec = tntp_spec();
    if let NetworkSource::Tntp(t) = &mut spec.network {
        t.net_path = data("absent.tntp");
    }
    assert!(generate_scenario(&spec, None).is_err());
}

/// Two fuel-vehicle classes that share the direct road and differ in size,
/// value of time and lot preference.
fn shared_edge_game() -> Game {
    let e = |tail, head, a, b, h| Edge { tail, head, a, b, h, virtual_edge: false };
    let edges = vec![
        e(0, 1, 0.10, 0.02, 1.0),
        e(1, 2, 0.10, 0.02, 1.0),
        e(0, 2, 0.12, 0.03, 2.0),
        e(2, 0, 0.20, 0.01, 0.0),
        e(1, 0, 0.10, 0.01, 0.0),
        e(2, 1, 0.10, 0.01, 0.0),
    ];
    let net = RoadNetwork::new(vec![1, 2, 3], edges, vec![], vec![1, 2]).unwrap();
    let class = |population: f64, eta: f64, w1: f64| AgentClass {
        kind: AgentKind::Fv,
        population,
        origin: 0,
        destination: 2,
        value_of_time: eta,
        energy_demand: 0.0,
        min_charge_fraction: 0.0,
        charge_slots: vec![],
        park_slots: vec![population, population],
        last_mile_weights: vec![0.05, w1, 0.05],
    };
    Game::new(
        net,
        vec![class(4.0, 10.0, 0.15), class(3.0, 14.0, 0.10)],
        FacilityPrices { charge: vec![], park: vec![2.0, 3.0] },
    )
    .unwrap()
}

#[test]
fn shared_edge_equilibrium_and_sensitivity_match_the_oracles() {
    let game = shared_edge_game();
    let gamma = game.contraction_step().unwrap().gamma;
    let c = DVector::from_vec(vec![0.6, 0.4, 0.5, 0.8]);
    let oracle = brute_force_ne(&game, &c, &BruteForceOptions::default()).unwrap();

    let mut state = InnerState::start(&game).unwrap();
    let mut settings = InnerSettings::new(gamma, 1e-12);
    settings.max_iters = 1_000_000;
    assert!(inner_loop(&game, &c, &mut state, &settings).unwrap().converged);
    for (a, b) in state.profile.iter().zip(&oracle.profile) {
        assert!((a - b).amax() < 1e-6);
    }

    let fd = fd_sensitivity(&game, &c, &state.profile, gamma, 1e-4, 1e-13).unwrap();
    assert!(fd.one_sided_gap < 1e-6, "configuration is not smooth: gap {:.3e}", fd.one_sided_gap);
    assert!(fd.central.iter().any(|b| b.amax() > 1e-3), "sensitivity is trivially zero");
    for (s, f) in state.sensitivity.iter().zip(&fd.central) {
        assert!((s - f).amax() < 1e-4);
    }
}

#[test]
fn hypergradient_matches_differences_of_the_implicit_objective() {
    let s = two_lot_instance().unwrap();
    let game = &s.game;
    for frac in [0.2, 0.4, 0.7] {
        let c = s.problem.caps.map(|cap| frac * cap);
        let mut state = InnerState::start(game).unwrap();
        let mut settings = InnerSettings::new(s.gamma, 1e-12);
        settings.max_iters = 1_000_000;
        inner_loop(game, &c, &mut state, &settings).unwrap();
        let g = hypergradient(game, &c, &state.profile, &state.sensitivity, &s.problem);
        let warm = state.profile.clone();
        let f = |x: &DVector<f64>| {
            let mut st = InnerState::from_profile(game, warm.clone()).unwrap();
            implicit_objective(game, &s.problem, x, &mut st, s.gamma, 1e-12).unwrap()
        };
        let fd = fd_gradient(f, &c, 1e-5);
        assert!((&g - &fd).amax() <= 1e-3 * fd.amax().max(1e-9), "at {frac}: {g} vs {fd}");
    }
}

#[test]
fn tight_inner_solves_make_the_outer_objective_non_increasing() {
    let s = two_lot_instance().unwrap();
    let schedules = Schedules { alpha0: Some(0.05), p: 1.0, sigma0: 1e-12, q: 0.5, sigma_floor: 1e-12 };
    let mut options = OuterOptions::new(s.gamma);
    options.max_outer = 60;
    let mut state = InnerState::start(&s.game).unwrap();
    let report = outer_loop(&s.game, &s.problem, &schedules, &DVector::zeros(2), &mut state, &options).unwrap();
    for w in report.rows.windows(2) {
        let tol = 1e-8 * (1.0 + w[0].objective.abs());
        assert!(w[1].objective <= w[0].objective + tol, "{} then {}", w[0].objective, w[1].objective);
    }
    for r in &report.rows {
        assert!(r.discounts.iter().zip(s.problem.caps.iter()).all(|(c, cap)| *c >= 0.0 && c <= cap));
    }
}

#[test]
fn brute_force_oracle_agrees_with_the_inner_loop_on_seeded_instances() {
    let mut compared = 0;
    for seed in 3u64..10 {
        let s = generate_scenario(&small_spec(seed, 4, 0, 1, 2), None).unwrap();
        if s.game.total_dim() > 60 || !s.game.monotonicity_certificate().strongly_monotone() {
            continue;
        }
        let c = s.problem.caps.map(|cap| 0.3 * cap);
        let oracle = brute_force_ne(&s.game, &c, &BruteForceOptions::default()).unwrap();
        let mut state = InnerState::start(&s.game).unwrap();
        let mut settings = InnerSettings::new(s.gamma, 1e-12);
        settings.sensitivity = false;
        settings.max_iters = 1_000_000;
        inner_loop(&s.game, &c, &mut state, &settings).unwrap();
        for (a, b) in state.profile.iter().zip(&oracle.profile) {
            assert!((a - b).amax() < 1e-6, "seed {seed}");
        }
        compared += 1;
    }
    assert!(compared >= 3, "only {compared} instances qualified");
}

#[test]
fn demo_results_are_identical_across_thread_counts() {
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let s = demo_scenario().unwrap();
            let (_, base) = baseline(&s).unwrap();
            solve_scenario(&s, &s.zero_discounts(), base).unwrap()
        })
    };
    let one = run(1);
    let four = run(4);
    assert_eq!(one.row.ttt_final.to_bits(), four.row.ttt_final.to_bits());
    assert_eq!(one.discounts, four.discounts);
    assert_eq!(one.report.rows.len(), four.report.rows.len());
}

/// Full-size check on the Anaheim network. Set `ANAHEIM_DIR` to a directory
/// holding `Anaheim_net.tntp` and `Anaheim_flow.tntp` to run it.
#[test]
fn anaheim_network_builds_a_forty_class_scenario() {
    let Ok(dir) = std::env::var("ANAHEIM_DIR") else {
        eprintln!("ANAHEIM_DIR not set; skipping");
        return;
    };
    let dir = PathBuf::from(dir);
    let spec = ScenarioSpec {
        network: NetworkSource::Tntp(TntpSource {
            net_path: dir.join("Anaheim_net.tntp"),
            flow_path: Some(dir.join("Anaheim_flow.tntp")),
            charge_ids: vec![50, 120, 200],
            park_ids: vec![60, 130, 210, 300, 380],
            build: BuildOptions {
                reference_flow: ReferenceFlow::Recorded,
                time_scale: 1.0 / 60.0,
                node_subset: Some((1..=100).chain([120, 130, 200, 210, 300, 380]).collect()),
                ..BuildOptions::default()
            },
        }),
        ..ScenarioSpec::default()
    };
    let s = generate_scenario(&spec, None).unwrap();
    assert_eq!(s.game.n_agents(), 40);
    assert!((s.game.agent(0).population - 606.46).abs() < 1e-9);
    assert!((s.game.agent(39).population - 2425.84).abs() < 1e-9);
    let mut state = InnerState::start(&s.game).unwrap();
    let mut settings = InnerSettings::new(s.gamma, 1e-3);
    settings.sensitivity = false;
    settings.max_iters = 200;
    inner_loop(&s.game, &s.zero_discounts(), &mut state, &settings).unwrap();
}
