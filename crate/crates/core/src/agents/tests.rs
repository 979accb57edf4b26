use super::*;
use crate::linalg::symmetric_part_min_eigenvalue;
use crate::network::Edge;
use approx::assert_relative_eq;

fn edge(tail: usize, head: usize, a: f64, b: f64, h: f64) -> Edge {
    Edge { tail, head, a, b, h, virtual_edge: false }
}

fn fv(origin: usize, destination: usize, population: f64, net: &RoadNetwork) -> AgentClass {
    AgentClass {
        kind: AgentKind::Fv,
        population,
        origin,
        destination,
        value_of_time: 30.0,
        energy_demand: 0.0,
        min_charge_fraction: 0.0,
        charge_slots: vec![population; net.charge_nodes().len()],
        park_slots: vec![population; net.park_nodes().len()],
        last_mile_weights: last_mile_weights(net, destination, DEFAULT_LAST_MILE_FLOOR),
    }
}

fn two_node() -> RoadNetwork {
    RoadNetwork::new(vec![1, 2], vec![edge(0, 1, 0.1, 0.0, 0.0), edge(1, 0, 0.1, 0.0, 0.0)], vec![], vec![1]).unwrap()
}

/// Triangle with a charger at 1 and lots at 1 and 2; origin 0, destination 2.
fn triangle() -> RoadNetwork {
    let edges = vec![
        edge(0, 1, 0.2, 0.01, 5.0),
        edge(1, 2, 0.1, 0.02, 3.0),
        edge(0, 2, 0.4, 0.03, 8.0),
        edge(2, 0, 0.3, 0.01, 0.0),
        edge(1, 0, 0.2, 0.01, 0.0),
        edge(2, 1, 0.1, 0.02, 0.0),
    ];
    RoadNetwork::new(vec![1, 2, 3], edges, vec![1], vec![1, 2]).unwrap()
}

fn pev(net: &RoadNetwork, population: f64, eta: f64) -> AgentClass {
    AgentClass {
        kind: AgentKind::Pev,
        population,
        origin: 0,
        destination: 2,
        value_of_time: eta,
        energy_demand: 30.0,
        min_charge_fraction: 0.2,
        charge_slots: vec![0.8 * population],
        park_slots: vec![0.8 * population, 0.8 * population],
        last_mile_weights: last_mile_weights(net, 2, DEFAULT_LAST_MILE_FLOOR),
    }
}

fn triangle_game() -> Game {
    let net = triangle();
    let mut fv_agent = fv(0, 2, 8.0, &net);
    fv_agent.value_of_time = 20.0;
    let agents = vec![pev(&net, 5.0, 30.0), fv_agent, pev(&net, 3.0, 40.0)];
    Game::new(net, agents, FacilityPrices { charge: vec![0.35], park: vec![20.0, 17.0] }).unwrap()
}

#[test]
fn single_edge_cost_by_hand() {
    let net = two_node();
    let agent = fv(0, 1, 1.0, &net);
    let game = Game::new(net, vec![agent], FacilityPrices { charge: vec![], park: vec![17.0] }).unwrap();
    let l = game.layout();
    let mut y = DVector::zeros(l.dim());
    y[l.phi(0)] = 1.0;
    y[l.park(1)] = 1.0;
    assert!(game.polyhedron(0).contains(&y, 1e-12));
    let sigma = game.aggregate_flow(&[y.clone()]);
    let c = DVector::zeros(game.discount_layout().dim());
    assert_relative_eq!(game.agent_cost(0, &c, &y, &sigma), 20.0, epsilon = 1e-12);
}

#[test]
fn parking_discount_lowers_the_price() {
    let net = two_node();
    let agent = fv(0, 1, 1.0, &net);
    let game = Game::new(net, vec![agent], FacilityPrices { charge: vec![], park: vec![20.0] }).unwrap();
    let l = game.layout();
    let mut y = DVector::zeros(l.dim());
    y[l.phi(0)] = 1.0;
    y[l.park(1)] = 1.0;
    let sigma = game.aggregate_flow(&[y.clone()]);
    let c = DVector::from_vec(vec![0.2 * 20.0]);
    assert_relative_eq!(game.cost_breakdown(0, &c, &y, &sigma).parking, 16.0, epsilon = 1e-12);
}

#[test]
fn last_mile_term_by_hand() {
    let net = triangle();
    let mut agent = fv(0, 2, 1.0, &net);
    agent.last_mile_weights[1] = 0.5;
    let game = Game::new(net, vec![agent], FacilityPrices { charge: vec![0.35], park: vec![20.0, 17.0] }).unwrap();
    let l = game.layout();
    let mut y = DVector::zeros(l.dim());
    y[l.phi(0)] = 1.0;
    y[l.park(1)] = 1.0;
    let sigma = game.aggregate_flow(&[y.clone()]);
    let c = DVector::zeros(game.discount_layout().dim());
    // mass 1 at node 1 instead of the destination: 30 * (0.5 * 1 + ε * 1)
    let expected = 30.0 * (0.5 + DEFAULT_LAST_MILE_FLOOR);
    assert_relative_eq!(game.cost_breakdown(0, &c, &y, &sigma).last_mile, expected, epsilon = 1e-12);
}

#[test]
fn last_mile_weights_use_free_flow_times() {
    let net = triangle();
    let w = last_mile_weights(&net, 2, 1e-3);
    // from lot 1 to node 2: direct edge a = 0.1
    assert_relative_eq!(w[1], 0.1, epsilon = 1e-15);
    assert_eq!(w[2], 1e-3);
    assert_eq!(w[0], 1e-3);
}

#[test]
fn minimum_charge_row() {
    let net = RoadNetwork::new(
        vec![1, 2, 3],
        vec![edge(0, 1, 0.1, 0.0, 0.0), edge(1, 2, 0.1, 0.0, 0.0), edge(2, 0, 0.1, 0.0, 0.0)],
        vec![1, 2],
        vec![2],
    )
    .unwrap();
    let mut agent = pev(&net, 10.0, 30.0);
    agent.min_charge_fraction = 0.3;
    agent.charge_slots = vec![10.0, 10.0];
    agent.park_slots = vec![10.0];
    let poly = build_feasible_polyhedron(0, &agent, &net).unwrap();
    let l = StrategyLayout { n_edges: 3, n_nodes: 3 };
    let row = poly.a_in().row(0);
    let mut ok = DVector::zeros(l.dim());
    ok[l.charge(1)] = 0.3;
    let mut bad = DVector::zeros(l.dim());
    bad[l.charge(1)] = 0.1;
    bad[l.charge(2)] = 0.1;
    assert!((row * &ok)[0] <= poly.b_in()[0] + 1e-15);
    assert!((row * &bad)[0] > poly.b_in()[0]);
}

#[test]
fn slot_cap_row_scales_with_population() {
    let net =
        RoadNetwork::new(vec![1, 2], vec![edge(0, 1, 0.1, 0.0, 0.0), edge(1, 0, 0.1, 0.0, 0.0)], vec![1], vec![1])
            .unwrap();
    let agent = AgentClass {
        kind: AgentKind::Pev,
        population: 100.0,
        origin: 0,
        destination: 1,
        value_of_time: 30.0,
        energy_demand: 30.0,
        min_charge_fraction: 0.2,
        charge_slots: vec![75.0],
        park_slots: vec![75.0],
        last_mile_weights: last_mile_weights(&net, 1, DEFAULT_LAST_MILE_FLOOR),
    };
    let poly = build_feasible_polyhedron(0, &agent, &net).unwrap();
    let l = StrategyLayout { n_edges: 2, n_nodes: 2 };
    // rows: minimum charge, charge cap, park cap
    assert_eq!(poly.a_in()[(1, l.charge(1))], 100.0);
    assert_eq!(poly.b_in()[1], 75.0);
}

#[test]
fn fuel_vehicles_cannot_charge() {
    let game = triangle_game();
    let l = game.layout();
    let poly = game.polyhedron(1);
    for v in 0..l.n_nodes {
        assert_eq!(poly.upper()[l.charge(v)], 0.0);
    }
    let poly = game.polyhedron(0);
    assert_eq!(poly.upper()[l.charge(1)], 1.0);
    assert_eq!(poly.upper()[l.charge(0)], 0.0);
}

#[test]
fn infeasible_minimum_charge_is_reported() {
    let net = triangle();
    let mut agent = pev(&net, 10.0, 30.0);
    agent.min_charge_fraction = 0.5;
    agent.charge_slots = vec![3.0];
    match build_feasible_polyhedron(4, &agent, &net) {
        Err(Error::Infeasible { agent, .. }) => assert_eq!(agent, 4),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn invalid_classes_are_rejected() {
    let net = triangle();
    let prices = FacilityPrices { charge: vec![0.35], park: vec![20.0, 17.0] };
    let mut a = fv(0, 2, 1.0, &net);
    a.destination = 0;
    assert!(Game::new(net.clone(), vec![a], prices.clone()).is_err());
    let mut a = fv(0, 2, 1.0, &net);
    a.min_charge_fraction = 0.1;
    assert!(Game::new(net.clone(), vec![a], prices.clone()).is_err());
    let mut a = fv(0, 2, 1.0, &net);
    a.last_mile_weights[2] = 0.0;
    assert!(Game::new(net, vec![a], prices).is_err());
}

#[test]
fn feasible_points_route_the_whole_class() {
    let game = triangle_game();
    let l = game.layout();
    for y in game.default_start().unwrap() {
        let total: f64 = (0..l.n_nodes).map(|v| y[l.charge(v)] + y[l.park(v)]).sum();
        assert_relative_eq!(total, 1.0, epsilon = 1e-9);
    }
}

#[test]
fn aggregates_by_hand() {
    let net = two_node();
    let game = Game::new(
        net.clone(),
        vec![fv(0, 1, 10.0, &net), fv(0, 1, 4.0, &net)],
        FacilityPrices { charge: vec![], park: vec![17.0] },
    )
    .unwrap();
    let l = game.layout();
    let mut y1 = DVector::zeros(l.dim());
    y1[l.phi(0)] = 0.5;
    let y2 = DVector::zeros(l.dim());
    assert_relative_eq!(game.aggregate_flow(&[y1, y2])[0], 5.0);

    let m = game.discount_layout().dim();
    let zero = vec![DMatrix::zeros(l.dim(), m); 2];
    assert_eq!(game.aggregate_sensitivity(&zero), DMatrix::zeros(2, m));
    let mut s1 = DMatrix::zeros(l.dim(), m);
    let mut s2 = DMatrix::zeros(l.dim(), m);
    s1[(0, 0)] = 0.1;
    s2[(0, 0)] = -0.2;
    s2[(0, 1)] = 0.5;
    s1[(l.park(1), 0)] = 9.0;
    let agg = game.aggregate_sensitivity(&[s1, s2]);
    // 10 * 0.1 + 4 * (-0.2) = 0.2 and 4 * 0.5 = 2
    assert_relative_eq!(agg[(0, 0)], 0.2, epsilon = 1e-15);
    assert_relative_eq!(agg[(0, 1)], 2.0, epsilon = 1e-15);
    assert_eq!(agg[(1, 0)], 0.0);
}

#[test]
fn gradient_at_zero_flow_is_latency_times_value_of_time() {
    let net =
        RoadNetwork::new(vec![1, 2], vec![edge(0, 1, 0.2, 0.01, 7.0), edge(1, 0, 0.1, 0.0, 0.0)], vec![], vec![1])
            .unwrap();
    let agent = fv(0, 1, 3.0, &net);
    let game = Game::new(net, vec![agent], FacilityPrices { charge: vec![], park: vec![17.0] }).unwrap();
    let y = DVector::zeros(game.layout().dim());
    let c = DVector::zeros(1);
    let f = game.pseudo_gradient(&c, &[y]);
    assert_relative_eq!(f[0][0], 30.0 * 3.0 * (0.2 + 0.01 * 7.0), epsilon = 1e-12);
}

#[test]
fn pseudo_gradient_is_affine_with_the_assembled_jacobian() {
    let game = triangle_game();
    let c = DVector::from_fn(game.discount_layout().dim(), |k, _| 0.01 * k as f64);
    let n = game.layout().dim();
    let split = |v: &DVector<f64>| -> Vec<DVector<f64>> {
        (0..game.n_agents()).map(|i| v.rows(i * n, n).into_owned()).collect()
    };
    let stack = |blocks: Vec<DVector<f64>>| -> DVector<f64> {
        DVector::from_iterator(blocks.len() * n, blocks.into_iter().flat_map(|b| b.iter().copied().collect::<Vec<_>>()))
    };
    let jf = game.full_jacobian();
    for seed in 0..5 {
        let y1 = DVector::from_fn(game.total_dim(), |k, _| ((k * 7 + seed * 3) % 11) as f64 / 11.0);
        let y2 = DVector::from_fn(game.total_dim(), |k, _| ((k * 5 + seed) % 13) as f64 / 13.0);
        let f1 = stack(game.pseudo_gradient(&c, &split(&y1)));
        let f2 = stack(game.pseudo_gradient(&c, &split(&y2)));
        let diff = &f1 - &f2 - &jf * (&y1 - &y2);
        assert!(diff.amax() <= 1e-10 * (1.0 + f1.amax()));
    }
}

#[test]
fn pseudo_gradient_matches_central_differences() {
    let game = triangle_game();
    let c = DVector::from_fn(game.discount_layout().dim(), |k, _| 0.02 * k as f64);
    let profile: Vec<DVector<f64>> = game.default_start().unwrap();
    let f = game.pseudo_gradient(&c, &profile);
    let h = 1e-6;
    for i in 0..game.n_agents() {
        for k in 0..game.layout().dim() {
            let mut plus = profile.clone();
            let mut minus = profile.clone();
            plus[i][k] += h;
            minus[i][k] -= h;
            let fp = game.agent_cost(i, &c, &plus[i], &game.aggregate_flow(&plus));
            let fm = game.agent_cost(i, &c, &minus[i], &game.aggregate_flow(&minus));
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - f[i][k]).abs() <= 1e-6 * (1.0 + f[i][k].abs()), "agent {i} coord {k}: {fd} vs {}", f[i][k]);
        }
    }
}

#[test]
fn last_mile_gradient_vanishes_at_the_destination() {
    let game = triangle_game();
    let l = game.layout();
    let mut y = DVector::zeros(l.dim());
    y[l.phi(2)] = 1.0;
    y[l.park(2)] = 1.0;
    let sigma = game.aggregate_flow(&[y.clone(), y.clone(), y.clone()]);
    let c = DVector::zeros(game.discount_layout().dim());
    let g = game.agent_gradient(1, &c, &y, &sigma);
    // only the price terms remain
    for v in 0..l.n_nodes {
        let price = game.network().park_nodes().iter().position(|&p| p == v).map_or(0.0, |k| game.prices().park[k]);
        assert_relative_eq!(g[l.park(v)], price, epsilon = 1e-12);
        assert_eq!(g[l.charge(v)], 0.0);
    }
}

#[test]
fn discount_jacobian_reads_off_the_prices() {
    let game = triangle_game();
    let l = game.layout();
    let dl = game.discount_layout();
    let j = game.discount_jacobian(0);
    assert_eq!(j[(l.charge(1), dl.charge(0, 0))], -30.0);
    assert_eq!(j[(l.park(2), dl.park(0, 1))], -1.0);
    assert_eq!(j.iter().filter(|v| **v != 0.0).count(), 3);
    // perturbing one discount moves exactly that pseudo-gradient entry
    let y = game.default_start().unwrap();
    let c0 = DVector::zeros(dl.dim());
    let mut c1 = c0.clone();
    c1[dl.charge(0, 0)] = 0.01;
    let d = &game.pseudo_gradient(&c1, &y)[0] - &game.pseudo_gradient(&c0, &y)[0];
    assert_relative_eq!(d[l.charge(1)], -30.0 * 0.01, epsilon = 1e-12);
    assert_eq!(d.iter().filter(|v| **v != 0.0).count(), 1);
}

#[test]
fn certificate_for_one_agent() {
    let net = triangle();
    let game = Game::new(
        net.clone(),
        vec![fv(0, 2, 4.0, &net)],
        FacilityPrices { charge: vec![0.35], park: vec![20.0, 17.0] },
    )
    .unwrap();
    let rep = game.monotonicity_certificate();
    let b_min = net.edges().iter().map(|e| e.b).fold(f64::INFINITY, f64::min);
    assert_relative_eq!(rep.phi_block_min, 2.0 * 30.0 * 16.0 * b_min, epsilon = 1e-9);
    assert!(rep.strongly_monotone());
}

#[test]
fn certificate_without_congestion_is_zero() {
    let net = two_node();
    let game =
        Game::new(net.clone(), vec![fv(0, 1, 4.0, &net)], FacilityPrices { charge: vec![], park: vec![17.0] }).unwrap();
    let rep = game.monotonicity_certificate();
    assert_eq!(rep.phi_block_min, 0.0);
    assert!(!rep.strongly_monotone());
}

#[test]
fn certificate_matches_dense_eigensolve_on_free_coordinates() {
    let game = triangle_game();
    let rep = game.monotonicity_certificate();
    let free = game.free_coordinates();
    let jf = game.full_jacobian();
    let restricted = jf.select_rows(&free).select_columns(&free);
    let dense = symmetric_part_min_eigenvalue(&restricted);
    assert_relative_eq!(rep.min_eigenvalue, dense, epsilon = 1e-9 * (1.0 + dense.abs()));
    assert_relative_eq!(rep.full_space_min, symmetric_part_min_eigenvalue(&jf).min(0.0), epsilon = 1e-9);
    let norm = crate::linalg::spectral_norm(&restricted);
    assert_relative_eq!(rep.lipschitz, norm, epsilon = 1e-9 * norm);
}

#[test]
fn certificate_ignores_agent_order() {
    let game = triangle_game();
    let mut agents = game.agents().to_vec();
    agents.reverse();
    let other = game.with_agents(agents).unwrap();
    let a = game.monotonicity_certificate();
    let b = other.monotonicity_certificate();
    assert_relative_eq!(a.min_eigenvalue, b.min_eigenvalue, epsilon = 1e-12);
    assert_relative_eq!(a.lipschitz, b.lipschitz, epsilon = 1e-9);
}

#[test]
fn scenario_json_round_trip() {
    let game = triangle_game();
    let text = game.to_json().unwrap();
    let back = Game::from_json(&text).unwrap();
    assert_eq!(back.agents(), game.agents());
    assert_eq!(back.prices(), game.prices());
    assert!(Game::from_json(&text.replace("\"schema_version\": 1", "\"schema_version\": 9")).is_err());
}

#[test]
fn contraction_step_matches_a_dense_norm_scan() {
    let net = triangle();
    let mut a = fv(0, 2, 4.0, &net);
    a.value_of_time = 20.0;
    let b = fv(1, 2, 2.0, &net);
    let game = Game::new(net, vec![a, b], FacilityPrices { charge: vec![0.35], park: vec![20.0, 17.0] }).unwrap();
    let step = game.contraction_step().unwrap();
    let free = game.free_coordinates();
    let j = game.full_jacobian().select_rows(&free).select_columns(&free);
    let n = free.len();
    let rho = |g: f64| crate::linalg::spectral_norm(&(DMatrix::identity(n, n) - &j * g));
    assert_relative_eq!(rho(step.gamma), step.rate, epsilon = 1e-9);
    let best_scan = (1..400).map(|k| rho(step.gamma * k as f64 / 200.0)).fold(f64::INFINITY, f64::min);
    assert!(step.rate <= best_scan + 1e-9);
    let classical = game.monotonicity_certificate().default_gamma().unwrap();
    assert!(step.rate <= rho(classical) + 1e-12);
}

#[test]
fn contraction_step_with_a_singular_last_mile_block_is_nonexpansive() {
    let game = triangle_game();
    let step = game.contraction_step().unwrap();
    let free = game.free_coordinates();
    let j = game.full_jacobian().select_rows(&free).select_columns(&free);
    let n = free.len();
    let dense = crate::linalg::spectral_norm(&(DMatrix::identity(n, n) - &j * step.gamma));
    assert!(dense <= 1.0 + 1e-12);
    assert!(step.rate < 1.0);
}
