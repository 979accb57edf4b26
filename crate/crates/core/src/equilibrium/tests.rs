use super::*;
use crate::agents::{last_mile_weights, AgentClass, AgentKind, FacilityPrices, DEFAULT_LAST_MILE_FLOOR};
use crate::network::{Edge, RoadNetwork};

fn edge(tail: usize, head: usize, a: f64, b: f64) -> Edge {
    Edge { tail, head, a, b, h: 1.0, virtual_edge: false }
}

fn fv(net: &RoadNetwork, population: f64, eta: f64) -> AgentClass {
    let mut w = last_mile_weights(net, 2, DEFAULT_LAST_MILE_FLOOR);
    w[2] = 0.05;
    AgentClass {
        kind: AgentKind::Fv,
        population,
        origin: 0,
        destination: 2,
        value_of_time: eta,
        energy_demand: 0.0,
        min_charge_fraction: 0.0,
        charge_slots: vec![population; net.charge_nodes().len()],
        park_slots: vec![population; net.park_nodes().len()],
        last_mile_weights: w,
    }
}

/// Two routes from 0 to 2 (direct, or through lot 1) shared by two classes.
fn shared_routes() -> Game {
    let net = RoadNetwork::new(
        vec![1, 2, 3],
        vec![
            edge(0, 1, 0.2, 0.02),
            edge(1, 2, 0.1, 0.03),
            edge(0, 2, 0.3, 0.05),
            edge(2, 0, 0.3, 0.04),
            edge(1, 0, 0.2, 0.02),
            edge(2, 1, 0.1, 0.03),
        ],
        vec![],
        vec![1, 2],
    )
    .unwrap();
    let agents = vec![fv(&net, 3.0, 1.0), fv(&net, 2.0, 1.5)];
    Game::new(net, agents, FacilityPrices { charge: vec![], park: vec![0.4, 0.5] }).unwrap()
}

fn singleton() -> Game {
    let net = RoadNetwork::new(
        vec![1, 2],
        vec![
            Edge { tail: 0, head: 1, a: 0.1, b: 0.01, h: 0.0, virtual_edge: false },
            Edge { tail: 1, head: 0, a: 0.1, b: 0.01, h: 0.0, virtual_edge: false },
        ],
        vec![],
        vec![1],
    )
    .unwrap();
    let agent = AgentClass {
        kind: AgentKind::Fv,
        population: 2.0,
        origin: 0,
        destination: 1,
        value_of_time: 1.0,
        energy_demand: 0.0,
        min_charge_fraction: 0.0,
        charge_slots: vec![],
        park_slots: vec![2.0],
        last_mile_weights: last_mile_weights(&net, 1, DEFAULT_LAST_MILE_FLOOR),
    };
    Game::new(net, vec![agent], FacilityPrices { charge: vec![], park: vec![1.0] }).unwrap()
}

fn zero_c(game: &Game) -> DVector<f64> {
    DVector::zeros(game.discount_layout().dim())
}

#[test]
fn singleton_feasible_set_from_any_start() {
    let game = singleton();
    let c = DVector::from_vec(vec![0.3]);
    let l = game.layout();
    let mut state = InnerState::from_profile(&game, vec![DVector::from_element(l.dim(), 0.7)]).unwrap();
    let report = inner_loop(&game, &c, &mut state, &InnerSettings::new(0.5, 1e-10)).unwrap();
    assert!(report.converged);
    let y = &state.profile[0];
    assert!((y[l.phi(0)] - 1.0).abs() < 1e-9);
    assert!(y[l.phi(1)].abs() < 1e-9);
    assert!((y[l.park(1)] - 1.0).abs() < 1e-9);
    assert!(state.sensitivity[0].amax() < 1e-9);
    let check = verify_ne(&game, &c, &state.profile, 1e-7).unwrap();
    assert!(check.is_equilibrium);
    assert!(check.worst < 1e-7);
}

#[test]
fn converged_state_is_a_fixed_point() {
    let game = shared_routes();
    let c = zero_c(&game);
    let settings = InnerSettings::for_game(&game, 1e-11).unwrap();
    let mut state = InnerState::start(&game).unwrap();
    let first = inner_loop(&game, &c, &mut state, &settings).unwrap();
    assert!(first.converged);
    assert!(first.iterations > 1);
    let again = inner_loop(&game, &c, &mut state, &settings).unwrap();
    assert_eq!(again.iterations, 1);
    assert!(again.residual() <= 1e-11);
}

#[test]
fn inner_loop_result_passes_the_equilibrium_check() {
    let game = shared_routes();
    let c = DVector::from_vec(vec![0.05, 0.0, 0.0, 0.1]);
    let settings = InnerSettings::for_game(&game, 1e-10).unwrap();
    let mut state = InnerState::start(&game).unwrap();
    inner_loop(&game, &c, &mut state, &settings).unwrap();
    let check = verify_ne(&game, &c, &state.profile, 1e-6).unwrap();
    assert!(check.is_equilibrium, "{check:?}");

    // move one agent 10% toward a vertex of its feasible set
    let f = game.pseudo_gradient(&c, &state.profile);
    let vertex = linear_minimizer(game.polyhedron(0), &(-&f[0])).unwrap();
    let mut moved = state.profile.clone();
    moved[0] = &moved[0] * 0.9 + vertex * 0.1;
    let check = verify_ne(&game, &c, &moved, 1e-6).unwrap();
    assert!(!check.is_equilibrium);
    assert!(check.agents[0].vi_gap > 0.0 && check.agents[0].best_response_gap > 0.0);
}

#[test]
fn restarts_reach_the_same_point() {
    let game = shared_routes();
    let c = zero_c(&game);
    let settings = InnerSettings::for_game(&game, 1e-10).unwrap();
    let mut reference = InnerState::start(&game).unwrap();
    inner_loop(&game, &c, &mut reference, &settings).unwrap();
    let n = game.layout().dim();
    for seed in 1..4 {
        let profile = (0..game.n_agents())
            .map(|i| DVector::from_fn(n, |k, _| ((k * 13 + i * 7 + seed * 5) % 17) as f64 / 17.0))
            .collect();
        let mut state = InnerState::from_profile(&game, profile).unwrap();
        inner_loop(&game, &c, &mut state, &settings).unwrap();
        assert!((state.stacked() - reference.stacked()).amax() < 1e-7);
    }
}

#[test]
fn sensitivity_satisfies_its_fixed_point_equation() {
    let game = shared_routes();
    let c = zero_c(&game);
    let settings = InnerSettings::for_game(&game, 1e-10).unwrap();
    let mut state = InnerState::start(&game).unwrap();
    let report = inner_loop(&game, &c, &mut state, &settings).unwrap();
    assert!(report.jacobian_refreshes >= 1 && report.jacobian_refreshes < report.iterations);
    let r = sensitivity_fixed_point_residual(&game, &c, &state, settings.gamma, &settings.active_set).unwrap();
    assert!(r < 1e-8, "residual {r}");
}

#[test]
fn pinned_rows_of_the_sensitivity_stay_zero() {
    let game = shared_routes();
    let c = zero_c(&game);
    let settings = InnerSettings::for_game(&game, 1e-10).unwrap();
    let mut state = InnerState::start(&game).unwrap();
    inner_loop(&game, &c, &mut state, &settings).unwrap();
    for (i, s) in state.sensitivity.iter().enumerate() {
        for &k in game.polyhedron(i).pinned() {
            assert_eq!(s.row(k).amax(), 0.0);
        }
    }
}

#[test]
fn thread_count_does_not_change_the_result() {
    let game = shared_routes();
    let c = DVector::from_vec(vec![0.02, 0.01, 0.0, 0.03]);
    let settings = InnerSettings::for_game(&game, 1e-10).unwrap();
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut state = InnerState::start(&game).unwrap();
            inner_loop(&game, &c, &mut state, &settings).unwrap();
            (state.stacked(), stack_sensitivity(&state.sensitivity))
        })
    };
    let (y1, s1) = run(1);
    let (y4, s4) = run(4);
    assert_eq!(y1, y4);
    assert_eq!(s1, s4);
}

#[test]
fn tail_residuals_decrease() {
    let game = shared_routes();
    let c = zero_c(&game);
    let mut settings = InnerSettings::for_game(&game, 1e-10).unwrap();
    settings.trace = true;
    let mut state = InnerState::start(&game).unwrap();
    let report = inner_loop(&game, &c, &mut state, &settings).unwrap();
    let tail = &report.trace[report.trace.len() / 2..];
    for w in tail.windows(2) {
        assert!(w[1].residual_y <= w[0].residual_y * (1.0 + 1e-9) + 1e-14);
    }
}

#[test]
fn oversized_step_is_reported_as_divergence() {
    let game = shared_routes();
    let c = zero_c(&game);
    let mut settings = InnerSettings::new(1e3, 1e-10);
    settings.sensitivity = false;
    settings.max_iters = 2000;
    let mut state = InnerState::start(&game).unwrap();
    match inner_loop(&game, &c, &mut state, &settings) {
        Err(Error::Divergence { .. }) => {}
        Ok(r) => assert!(!r.converged, "converged with an oversized step"),
        Err(e) => panic!("unexpected error {e}"),
    }
}

#[test]
fn bad_settings_are_rejected() {
    let game = shared_routes();
    let mut state = InnerState::start(&game).unwrap();
    assert!(inner_loop(&game, &zero_c(&game), &mut state, &InnerSettings::new(0.0, 1e-8)).is_err());
    assert!(inner_loop(&game, &DVector::zeros(1), &mut state, &InnerSettings::new(0.1, 1e-8)).is_err());
    assert!(InnerState::new(&game, vec![], vec![]).is_err());
}
