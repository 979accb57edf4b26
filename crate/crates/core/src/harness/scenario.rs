//! Scenario description, seeded generation and the bundled demo.

use std::path::PathBuf;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agents::{last_mile_weights, AgentClass, AgentKind, FacilityPrices, Game};
use crate::error::{Error, Result};
use crate::incentives::{DiscountMode, Objective, OuterOptions, Schedules, TaProblem};
use crate::network::{build_network, load_tntp, BuildOptions, Edge, RoadNetwork};

/// Where the road network comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NetworkSource {
    /// The bundled four-node congestion demo.
    Demo,
    Synthetic(SyntheticNetworkSpec),
    Tntp(TntpSource),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TntpSource {
    pub net_path: PathBuf,
    #[serde(default)]
    pub flow_path: Option<PathBuf>,
    pub charge_ids: Vec<u32>,
    pub park_ids: Vec<u32>,
    #[serde(default)]
    pub build: BuildOptions,
}

/// Random planar road graph: a bidirectional ring through all nodes in
/// angular order plus bidirectional chords to nearest neighbours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticNetworkSpec {
    pub nodes: usize,
    /// Nearest-neighbour chords added per node.
    pub chords_per_node: usize,
    /// Free-flow time range in hours, scaled by distance.
    pub free_flow: [f64; 2],
    pub slope: [f64; 2],
    pub background: [f64; 2],
    pub n_charge: usize,
    pub n_park: usize,
}

impl Default for SyntheticNetworkSpec {
    fn default() -> Self {
        Self {
            nodes: 6,
            chords_per_node: 1,
            free_flow: [0.05, 0.3],
            slope: [0.005, 0.02],
            background: [0.0, 10.0],
            n_charge: 1,
            n_park: 2,
        }
    }
}

/// How vehicle classes are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentSpec {
    pub n_pev: usize,
    pub n_fv: usize,
    pub n_vehicles: f64,
    /// Share of all vehicles that are incentive-eligible PEVs; split evenly over PEV classes.
    pub pev_penetration: f64,
    pub fv_penetration: f64,
    pub value_of_time: [f64; 2],
    pub energy_demand: [f64; 2],
    pub min_charge_fraction: [f64; 2],
    /// Slot cap per facility is `slot_factor · P_i / n_facilities`.
    pub slot_factor: f64,
    pub last_mile_floor: f64,
    /// External node ids `(origin, destination)`, cycled over classes.
    /// Random distinct pairs when empty.
    pub od_pairs: Vec<(u32, u32)>,
}

impl Default for AgentSpec {
    fn default() -> Self {
        Self {
            n_pev: 20,
            n_fv: 20,
            n_vehicles: 242_584.0,
            pev_penetration: 0.05,
            fv_penetration: 0.20,
            value_of_time: [30.0, 30.0],
            energy_demand: [20.0, 60.0],
            min_charge_fraction: [0.0, 0.5],
            slot_factor: 1.5,
            last_mile_floor: 0.05,
            od_pairs: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriceSpec {
    /// Per charging facility, cycled when shorter than the facility list ($/kWh).
    pub charge: Vec<f64>,
    /// Per parking facility, cycled ($).
    pub park: Vec<f64>,
}

impl Default for PriceSpec {
    fn default() -> Self {
        Self { charge: vec![0.35, 0.3], park: vec![17.0, 20.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "ids", rename_all = "snake_case")]
pub enum Decongestion {
    All,
    /// Edge indices.
    Edges(Vec<usize>),
    /// External node ids; edges with both endpoints in the set.
    Nodes(Vec<u32>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaSpec {
    pub budget: f64,
    pub mu: f64,
    /// Absolute cap on charging discounts ($/kWh); must be below every charging price.
    pub charge_cap: f64,
    /// Absolute cap on parking discounts ($).
    pub park_cap: f64,
    pub objective: Objective,
    pub mode: DiscountMode,
    pub decongestion: Decongestion,
}

impl Default for TaSpec {
    fn default() -> Self {
        Self {
            budget: 5000.0,
            mu: 1e3,
            charge_cap: 0.2,
            park_cap: 5.0,
            objective: Objective::Ttt,
            mode: DiscountMode::Personalized,
            decongestion: Decongestion::All,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GammaRule {
    /// `μ/L²` from the monotonicity certificate.
    Classical,
    /// The minimizer of `‖I − γ JF‖`.
    #[default]
    Contraction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSpec {
    /// Explicit inner step; overrides `gamma_rule`.
    pub gamma: Option<f64>,
    pub gamma_rule: GammaRule,
    pub max_outer: usize,
    pub max_inner_iters: usize,
    pub step_tol: f64,
    pub budget_slack: f64,
}

impl Default for SolverSpec {
    fn default() -> Self {
        Self {
            gamma: None,
            gamma_rule: GammaRule::Contraction,
            max_outer: 500,
            max_inner_iters: 100_000,
            step_tol: 1e-6,
            budget_slack: 1e-3,
        }
    }
}

/// Everything needed to materialize a [`Scenario`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub network: NetworkSource,
    pub agents: AgentSpec,
    pub prices: PriceSpec,
    pub ta: TaSpec,
    pub schedules: Schedules,
    pub solver: SolverSpec,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            network: NetworkSource::Demo,
            agents: AgentSpec::default(),
            prices: PriceSpec::default(),
            ta: TaSpec::default(),
            schedules: Schedules::default(),
            solver: SolverSpec::default(),
        }
    }
}

impl ScenarioSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// A materialized instance: game, authority problem and solver settings.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub game: Game,
    pub problem: TaProblem,
    pub schedules: Schedules,
    pub gamma: f64,
    pub solver: SolverSpec,
}

impl Scenario {
    pub fn outer_options(&self) -> OuterOptions {
        let mut o = OuterOptions::new(self.gamma);
        o.max_outer = self.solver.max_outer;
        o.max_inner_iters = self.solver.max_inner_iters;
        o.step_tol = self.solver.step_tol;
        o.budget_slack = self.solver.budget_slack;
        o
    }

    pub fn zero_discounts(&self) -> DVector<f64> {
        DVector::zeros(self.game.discount_layout().dim())
    }

    pub fn with_problem(&self, problem: TaProblem) -> Self {
        Self { problem, ..self.clone() }
    }
}

/// Materializes `spec` deterministically; `seed` overrides `spec.seed`.
pub fn generate_scenario(spec: &ScenarioSpec, seed: Option<u64>) -> Result<Scenario> {
    let seed = seed.unwrap_or(spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let network = match &spec.network {
        NetworkSource::Demo => return demo_scenario_with(spec),
        NetworkSource::Synthetic(s) => synthetic_network(s, &mut rng)?,
        NetworkSource::Tntp(t) => {
            let net_text = std::fs::read_to_string(&t.net_path)?;
            let flow_text = t.flow_path.as_ref().map(std::fs::read_to_string).transpose()?;
            let raw = load_tntp(&net_text, flow_text.as_deref())?;
            build_network(&raw, &t.charge_ids, &t.park_ids, &t.build)?
        }
    };
    let agents = generate_agents(&spec.agents, &network, &mut rng)?;
    assemble(spec, network, agents)
}

pub(super) fn assemble(spec: &ScenarioSpec, network: RoadNetwork, agents: Vec<AgentClass>) -> Result<Scenario> {
    let cycle = |list: &[f64], n: usize, what: &str| -> Result<Vec<f64>> {
        if n > 0 && list.is_empty() {
            return Err(Error::Config(format!("no {what} prices given")));
        }
        Ok((0..n).map(|k| list[k % list.len()]).collect())
    };
    let prices = FacilityPrices {
        charge: cycle(&spec.prices.charge, network.charge_nodes().len(), "charging")?,
        park: cycle(&spec.prices.park, network.park_nodes().len(), "parking")?,
    };
    let edges = decongestion_edges(&spec.ta.decongestion, &network)?;
    let game = Game::new(network, agents, prices)?;
    let problem = ta_problem(&game, &spec.ta, edges)?;
    let gamma = select_gamma(&game, &spec.solver)?;
    Ok(Scenario { game, problem, schedules: spec.schedules, gamma, solver: spec.solver.clone() })
}

fn decongestion_edges(d: &Decongestion, net: &RoadNetwork) -> Result<Vec<usize>> {
    Ok(match d {
        Decongestion::All => (0..net.n_edges()).collect(),
        Decongestion::Edges(e) => e.clone(),
        Decongestion::Nodes(ids) => {
            let mut inside = vec![false; net.n_nodes()];
            for id in ids {
                let v = net.position(*id).ok_or_else(|| Error::Config(format!("unknown node id {id}")))?;
                inside[v] = true;
            }
            net.edges().iter().enumerate().filter(|(_, e)| inside[e.tail] && inside[e.head]).map(|(k, _)| k).collect()
        }
    })
}

fn ta_problem(game: &Game, ta: &TaSpec, edges: Vec<usize>) -> Result<TaProblem> {
    let layout = game.discount_layout();
    let prices = game.prices();
    let mut theta = DVector::zeros(layout.dim());
    for i in 0..layout.n_agents {
        for k in 0..layout.n_charge {
            theta[layout.charge(i, k)] = ta.charge_cap / prices.charge[k];
        }
        for k in 0..layout.n_park {
            theta[layout.park(i, k)] = ta.park_cap / prices.park[k];
        }
    }
    TaProblem::new(game, edges, ta.budget, ta.mu, &theta, ta.objective, ta.mode)
}

/// The inner step for `game` under `solver`.
pub fn select_gamma(game: &Game, solver: &SolverSpec) -> Result<f64> {
    if let Some(g) = solver.gamma {
        return Ok(g);
    }
    let contraction = game.contraction_step().map(|s| s.gamma);
    let classical = game.monotonicity_certificate().default_gamma();
    let gamma = match solver.gamma_rule {
        GammaRule::Contraction => contraction.or(classical),
        GammaRule::Classical => classical,
    };
    if game.n_agents() == 0 {
        return Ok(gamma.unwrap_or(1.0));
    }
    gamma.ok_or_else(|| Error::Config("no contracting step size found; set solver.gamma".into()))
}

/// Builds a random strongly connected road graph.
pub fn synthetic_network(spec: &SyntheticNetworkSpec, rng: &mut ChaCha8Rng) -> Result<RoadNetwork> {
    let n = spec.nodes;
    if n < 2 {
        return Err(Error::Config("synthetic network needs at least two nodes".into()));
    }
    if spec.n_charge + spec.n_park > n {
        return Err(Error::Config(format!("{} facilities on {n} nodes", spec.n_charge + spec.n_park)));
    }
    let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen::<f64>(), rng.gen::<f64>())).collect();
    let (cx, cy) = pts.iter().fold((0.0, 0.0), |(x, y), p| (x + p.0 / n as f64, y + p.1 / n as f64));
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        let ai = (pts[i].1 - cy).atan2(pts[i].0 - cx);
        let aj = (pts[j].1 - cy).atan2(pts[j].0 - cx);
        ai.total_cmp(&aj)
    });
    let dist = |i: usize, j: usize| ((pts[i].0 - pts[j].0).powi(2) + (pts[i].1 - pts[j].1).powi(2)).sqrt();
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    let add = |i: usize, j: usize, pairs: &mut Vec<(usize, usize)>| {
        let key = (i.min(j), i.max(j));
        if i != j && !pairs.contains(&key) {
            pairs.push(key);
        }
    };
    for k in 0..n {
        add(order[k], order[(k + 1) % n], &mut pairs);
    }
    for i in 0..n {
        let mut near: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        near.sort_by(|&a, &b| dist(i, a).total_cmp(&dist(i, b)));
        for &j in near.iter().take(spec.chords_per_node) {
            add(i, j, &mut pairs);
        }
    }
    let uniform = |r: &mut ChaCha8Rng, range: [f64; 2]| {
        if range[1] > range[0] {
            r.gen_range(range[0]..range[1])
        } else {
            range[0]
        }
    };
    let mut edges = Vec::with_capacity(2 * pairs.len());
    for &(i, j) in &pairs {
        let a = spec.free_flow[0] + (spec.free_flow[1] - spec.free_flow[0]) * dist(i, j) / 2f64.sqrt();
        for (tail, head) in [(i, j), (j, i)] {
            let b = uniform(rng, spec.slope);
            let h = uniform(rng, spec.background);
            edges.push(Edge { tail, head, a, b, h, virtual_edge: false });
        }
    }
    let mut nodes: Vec<usize> = (0..n).collect();
    nodes.shuffle(rng);
    let charge: Vec<usize> = nodes[..spec.n_charge].to_vec();
    let park: Vec<usize> = nodes[spec.n_charge..spec.n_charge + spec.n_park].to_vec();
    RoadNetwork::new((1..=n as u32).collect(), edges, charge, park)
}

/// Draws the vehicle classes: PEV classes first, then FV classes.
pub fn generate_agents(spec: &AgentSpec, network: &RoadNetwork, rng: &mut ChaCha8Rng) -> Result<Vec<AgentClass>> {
    let check_range = |name: &str, r: [f64; 2]| {
        if r[0] > r[1] || !r[0].is_finite() || !r[1].is_finite() {
            Err(Error::Config(format!("{name} range [{}, {}] is invalid", r[0], r[1])))
        } else {
            Ok(())
        }
    };
    check_range("value_of_time", spec.value_of_time)?;
    check_range("energy_demand", spec.energy_demand)?;
    check_range("min_charge_fraction", spec.min_charge_fraction)?;
    for (name, rho, count) in [("pev", spec.pev_penetration, spec.n_pev), ("fv", spec.fv_penetration, spec.n_fv)] {
        if count > 0 && !(rho > 0.0 && rho <= 1.0) {
            return Err(Error::Config(format!("{name} penetration {rho} outside (0, 1]")));
        }
    }
    if !(spec.n_vehicles > 0.0) {
        return Err(Error::Config("n_vehicles must be positive".into()));
    }
    if spec.n_pev > 0 && network.charge_nodes().is_empty() {
        return Err(Error::Config("PEV classes need at least one charging facility".into()));
    }
    let od: Vec<(usize, usize)> = spec
        .od_pairs
        .iter()
        .map(|&(o, d)| {
            let o = network.position(o).ok_or_else(|| Error::Config(format!("unknown origin id {o}")))?;
            let d = network.position(d).ok_or_else(|| Error::Config(format!("unknown destination id {d}")))?;
            Ok((o, d))
        })
        .collect::<Result<_>>()?;
    let uniform = |r: &mut ChaCha8Rng, range: [f64; 2]| {
        if range[1] > range[0] {
            r.gen_range(range[0]..range[1])
        } else {
            range[0]
        }
    };
    let nv = network.n_nodes();
    let nc = network.charge_nodes().len();
    let np = network.park_nodes().len();
    let mut agents = Vec::with_capacity(spec.n_pev + spec.n_fv);
    for idx in 0..spec.n_pev + spec.n_fv {
        let pev = idx < spec.n_pev;
        let (origin, destination) = if od.is_empty() {
            let o = rng.gen_range(0..nv);
            let mut d = rng.gen_range(0..nv - 1);
            if d >= o {
                d += 1;
            }
            (o, d)
        } else {
            od[idx % od.len()]
        };
        let population = if pev {
            spec.pev_penetration * spec.n_vehicles / spec.n_pev as f64
        } else {
            spec.fv_penetration * spec.n_vehicles / spec.n_fv as f64
        };
        let value_of_time = uniform(rng, spec.value_of_time);
        let (kind, energy_demand, min_charge_fraction) = if pev {
            (AgentKind::Pev, uniform(rng, spec.energy_demand), uniform(rng, spec.min_charge_fraction))
        } else {
            (AgentKind::Fv, 0.0, 0.0)
        };
        agents.push(AgentClass {
            kind,
            population,
            origin,
            destination,
            value_of_time,
            energy_demand,
            min_charge_fraction,
            charge_slots: vec![spec.slot_factor * population / nc.max(1) as f64; nc],
            park_slots: vec![spec.slot_factor * population / np.max(1) as f64; np],
            last_mile_weights: last_mile_weights(network, destination, spec.last_mile_floor),
        });
    }
    Ok(agents)
}

/// The bundled demo network: two suburbs (ids 1, 2), a park-and-ride hub with
/// a charger (id 3) and the centre (id 4). The radial roads into the centre
/// are congested and form the decongestion set.
pub fn demo_network() -> RoadNetwork {
    let e = |tail: usize, head: usize, a: f64, b: f64, h: f64| Edge { tail, head, a, b, h, virtual_edge: false };
    let edges = vec![
        e(0, 3, 0.15, 0.020, 5.0),
        e(3, 0, 0.30, 0.010, 5.0),
        e(1, 3, 0.20, 0.020, 5.0),
        e(3, 1, 0.35, 0.010, 5.0),
        e(0, 2, 0.15, 0.005, 2.0),
        e(2, 0, 0.15, 0.005, 2.0),
        e(1, 2, 0.20, 0.005, 2.0),
        e(2, 1, 0.20, 0.005, 2.0),
        e(2, 3, 0.15, 0.020, 5.0),
        e(3, 2, 0.15, 0.010, 5.0),
        e(0, 1, 0.25, 0.005, 1.0),
        e(1, 0, 0.25, 0.005, 1.0),
    ];
    RoadNetwork::new(vec![1, 2, 3, 4], edges, vec![2], vec![2, 3]).expect("demo network is valid")
}

/// The bundled demo with its default settings.
pub fn demo_scenario() -> Result<Scenario> {
    demo_scenario_with(&demo_spec())
}

/// Default spec for the demo: four classes, a small budget in dollars.
pub fn demo_spec() -> ScenarioSpec {
    ScenarioSpec {
        seed: 0,
        network: NetworkSource::Demo,
        agents: AgentSpec { n_pev: 2, n_fv: 2, ..AgentSpec::default() },
        prices: PriceSpec { charge: vec![0.35], park: vec![6.0, 8.0] },
        ta: TaSpec {
            budget: 20.0,
            mu: 1e3,
            charge_cap: 0.2,
            park_cap: 3.0,
            objective: Objective::Ttt,
            mode: DiscountMode::Personalized,
            decongestion: Decongestion::Edges(vec![0, 2, 8]),
        },
        schedules: Schedules { alpha0: None, p: 1.0, sigma0: 1e-6, q: 0.5, sigma_floor: 1e-10 },
        solver: SolverSpec { max_outer: 300, ..SolverSpec::default() },
    }
}

fn demo_scenario_with(spec: &ScenarioSpec) -> Result<Scenario> {
    let network = demo_network();
    let class = |kind: AgentKind, origin: usize, population: f64, eta: f64, q: f64, gbar: f64| {
        // Transit from the hub to the centre adds to the driving time.
        let mut w = last_mile_weights(&network, 3, 0.02);
        w[2] += 0.6;
        AgentClass {
            kind,
            population,
            origin,
            destination: 3,
            value_of_time: eta,
            energy_demand: q,
            min_charge_fraction: gbar,
            charge_slots: vec![population],
            park_slots: vec![population, population],
            last_mile_weights: w,
        }
    };
    let agents = vec![
        class(AgentKind::Pev, 0, 3.0, 20.0, 10.0, 0.2),
        class(AgentKind::Pev, 1, 2.0, 30.0, 8.0, 0.1),
        class(AgentKind::Fv, 0, 6.0, 15.0, 0.0, 0.0),
        class(AgentKind::Fv, 1, 5.0, 25.0, 0.0, 0.0),
    ];
    assemble(spec, network, agents)
}
