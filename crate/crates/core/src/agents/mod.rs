//! Vehicle classes, their feasible sets and costs, and the pseudo-gradient.
//!
//! Agent `i` chooses `y_i = (φ_i, g_i^c, g_i^p)` with `φ_i` one entry per
//! edge and `g_i^c`, `g_i^p` one entry per node, in that order. Charging
//! and parking fractions are pinned to zero through the box bounds at nodes
//! that do not host the facility, so every agent has the same dimension
//! `n_e + 2 n_v`.

mod certificate;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use certificate::{ContractionStep, MonotonicityReport};

use crate::error::{Error, Result};
use crate::network::{free_flow_distances, RoadNetwork};
use crate::projection::{project, Polyhedron, ProjectionSettings};

/// Default last-mile weight at the destination and at non-facility nodes (hours).
pub const DEFAULT_LAST_MILE_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    /// Plug-in electric vehicles: may charge or park.
    Pev,
    /// Fuel vehicles: park only.
    Fv,
}

/// A population of identical vehicles. Node fields are positions in the
/// network's node list; slot vectors follow the order of the network's
/// charging and parking node lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentClass {
    pub kind: AgentKind,
    /// Number of vehicles `P_i`.
    pub population: f64,
    pub origin: usize,
    pub destination: usize,
    /// `η_i` in $/hour.
    pub value_of_time: f64,
    /// `q_i`, total energy bought by the class when all of it charges.
    pub energy_demand: f64,
    /// `ḡ_i^c`, minimum fraction of the class that charges.
    pub min_charge_fraction: f64,
    /// `δ_i^c` in vehicles, one per charging node.
    pub charge_slots: Vec<f64>,
    /// `δ_i^p` in vehicles, one per parking node.
    pub park_slots: Vec<f64>,
    /// Diagonal of `W_i`, one per node (hours).
    pub last_mile_weights: Vec<f64>,
}

/// Diagonal of `W_i`: free-flow time from each facility node to the
/// destination, and `floor` at the destination and at every other node.
pub fn last_mile_weights(network: &RoadNetwork, destination: usize, floor: f64) -> Vec<f64> {
    let dist = free_flow_distances(network, &[destination]);
    (0..network.n_nodes())
        .map(
            |v| {
                if v != destination && network.is_facility(v) {
                    dist.get(v, destination).unwrap_or(floor)
                } else {
                    floor
                }
            },
        )
        .collect()
}

/// Base prices `c̄` per charging node ($/energy unit) and per parking node ($).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FacilityPrices {
    pub charge: Vec<f64>,
    pub park: Vec<f64>,
}

/// Index map of one agent's strategy vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StrategyLayout {
    pub n_edges: usize,
    pub n_nodes: usize,
}

impl StrategyLayout {
    pub fn dim(&self) -> usize {
        self.n_edges + 2 * self.n_nodes
    }

    pub fn phi(&self, edge: usize) -> usize {
        edge
    }

    pub fn charge(&self, node: usize) -> usize {
        self.n_edges + node
    }

    pub fn park(&self, node: usize) -> usize {
        self.n_edges + self.n_nodes + node
    }
}

/// Index map of the discount vector: per agent, its charging discounts
/// followed by its parking discounts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DiscountLayout {
    pub n_agents: usize,
    pub n_charge: usize,
    pub n_park: usize,
}

impl DiscountLayout {
    pub fn dim(&self) -> usize {
        self.n_agents * self.per_agent()
    }

    pub fn per_agent(&self) -> usize {
        self.n_charge + self.n_park
    }

    /// Discount of agent `agent` at the `k`-th charging node.
    pub fn charge(&self, agent: usize, k: usize) -> usize {
        agent * self.per_agent() + k
    }

    /// Discount of agent `agent` at the `k`-th parking node.
    pub fn park(&self, agent: usize, k: usize) -> usize {
        agent * self.per_agent() + self.n_charge + k
    }
}

/// Four-term decomposition of an agent's cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub travel: f64,
    pub charging: f64,
    pub parking: f64,
    pub last_mile: f64,
}

impl CostBreakdown {
    pub fn total(&self) -> f64 {
        self.travel + self.charging + self.parking + self.last_mile
    }
}

/// Network, agents and prices with the agents' feasible polyhedra.
#[derive(Debug, Clone)]
pub struct Game {
    network: RoadNetwork,
    agents: Vec<AgentClass>,
    prices: FacilityPrices,
    layout: StrategyLayout,
    discounts: DiscountLayout,
    polyhedra: Vec<Polyhedron>,
}

#[derive(Serialize, Deserialize)]
struct GameDoc {
    schema_version: u32,
    network: RoadNetwork,
    prices: FacilityPrices,
    agents: Vec<AgentClass>,
}

const GAME_SCHEMA_VERSION: u32 = 1;

impl Game {
    pub fn new(network: RoadNetwork, agents: Vec<AgentClass>, prices: FacilityPrices) -> Result<Self> {
        if prices.charge.len() != network.charge_nodes().len() || prices.park.len() != network.park_nodes().len() {
            return Err(Error::Validation(format!(
                "price table has {} charging and {} parking entries, network has {} and {}",
                prices.charge.len(),
                prices.park.len(),
                network.charge_nodes().len(),
                network.park_nodes().len()
            )));
        }
        if let Some(p) = prices.charge.iter().chain(&prices.park).find(|p| !(**p > 0.0) || !p.is_finite()) {
            return Err(Error::Validation(format!("base prices must be positive, got {p}")));
        }
        let layout = StrategyLayout { n_edges: network.n_edges(), n_nodes: network.n_nodes() };
        let discounts = DiscountLayout {
            n_agents: agents.len(),
            n_charge: network.charge_nodes().len(),
            n_park: network.park_nodes().len(),
        };
        let mut polyhedra = Vec::with_capacity(agents.len());
        for (i, agent) in agents.iter().enumerate() {
            validate_agent(i, agent, &network)?;
            polyhedra.push(build_feasible_polyhedron(i, agent, &network)?);
        }
        Ok(Self { network, agents, prices, layout, discounts, polyhedra })
    }

    pub fn network(&self) -> &RoadNetwork {
        &self.network
    }

    pub fn agents(&self) -> &[AgentClass] {
        &self.agents
    }

    pub fn agent(&self, i: usize) -> &AgentClass {
        &self.agents[i]
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    pub fn prices(&self) -> &FacilityPrices {
        &self.prices
    }

    pub fn layout(&self) -> StrategyLayout {
        self.layout
    }

    pub fn discount_layout(&self) -> DiscountLayout {
        self.discounts
    }

    pub fn polyhedron(&self, i: usize) -> &Polyhedron {
        &self.polyhedra[i]
    }

    /// Total number of strategy variables `n = Σ n_i`.
    pub fn total_dim(&self) -> usize {
        self.agents.len() * self.layout.dim()
    }

    /// Sum of all class populations.
    pub fn total_population(&self) -> f64 {
        self.agents.iter().map(|a| a.population).sum()
    }

    /// The same game with a different agent list (e.g. reordered).
    pub fn with_agents(&self, agents: Vec<AgentClass>) -> Result<Self> {
        Self::new(self.network.clone(), agents, self.prices.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = GameDoc {
            schema_version: GAME_SCHEMA_VERSION,
            network: self.network.clone(),
            prices: self.prices.clone(),
            agents: self.agents.clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: GameDoc = serde_json::from_str(text)?;
        if doc.schema_version != GAME_SCHEMA_VERSION {
            return Err(Error::Validation(format!(
                "unsupported scenario schema version {} (expected {GAME_SCHEMA_VERSION})",
                doc.schema_version
            )));
        }
        Self::new(doc.network, doc.agents, doc.prices)
    }

    fn check_discounts(&self, c: &DVector<f64>) {
        assert_eq!(c.len(), self.discounts.dim(), "discount vector dimension");
    }

    /// `σ = Σ_i P_i φ_i`, summed in agent order.
    pub fn aggregate_flow(&self, profile: &[DVector<f64>]) -> DVector<f64> {
        assert_eq!(profile.len(), self.agents.len(), "profile length");
        let ne = self.layout.n_edges;
        let mut sigma = DVector::zeros(ne);
        for (agent, y) in self.agents.iter().zip(profile) {
            sigma.axpy(agent.population, &y.rows(0, ne), 1.0);
        }
        sigma
    }

    /// `σ(s) = Σ_i P_i · (φ-rows of s_i)`, an `n_e × m` matrix.
    pub fn aggregate_sensitivity(&self, sens: &[DMatrix<f64>]) -> DMatrix<f64> {
        assert_eq!(sens.len(), self.agents.len(), "sensitivity count");
        let ne = self.layout.n_edges;
        let mut out = DMatrix::zeros(ne, self.discounts.dim());
        for (agent, s) in self.agents.iter().zip(sens) {
            out += s.rows(0, ne) * agent.population;
        }
        out
    }

    pub fn cost_breakdown(&self, i: usize, c: &DVector<f64>, y: &DVector<f64>, sigma: &DVector<f64>) -> CostBreakdown {
        self.check_discounts(c);
        let agent = &self.agents[i];
        let l = self.layout;
        let eta = agent.value_of_time;
        let travel: f64 = self
            .network
            .edges()
            .iter()
            .enumerate()
            .map(|(e, edge)| agent.population * y[l.phi(e)] * edge.latency(sigma[e]))
            .sum::<f64>()
            * eta;
        let charging: f64 = self
            .network
            .charge_nodes()
            .iter()
            .enumerate()
            .map(|(k, &v)| {
                agent.energy_demand * y[l.charge(v)] * (self.prices.charge[k] - c[self.discounts.charge(i, k)])
            })
            .sum();
        let parking: f64 = self
            .network
            .park_nodes()
            .iter()
            .enumerate()
            .map(|(k, &v)| y[l.park(v)] * (self.prices.park[k] - c[self.discounts.park(i, k)]))
            .sum();
        let last_mile = eta
            * (0..l.n_nodes)
                .map(|v| {
                    let gap = y[l.charge(v)] + y[l.park(v)] - self.target_share(i, v);
                    agent.last_mile_weights[v] * gap * gap
                })
                .sum::<f64>();
        CostBreakdown { travel, charging, parking, last_mile }
    }

    /// `f_i(c, y_i, σ)` where `σ` is the aggregate flow including agent `i`.
    pub fn agent_cost(&self, i: usize, c: &DVector<f64>, y: &DVector<f64>, sigma: &DVector<f64>) -> f64 {
        self.cost_breakdown(i, c, y, sigma).total()
    }

    /// `ĝ_i[v]`: one at the destination.
    fn target_share(&self, i: usize, v: usize) -> f64 {
        if v == self.agents[i].destination {
            1.0
        } else {
            0.0
        }
    }

    /// `∇_{y_i} f_i` with the other agents fixed; `σ` includes agent `i`.
    pub fn agent_gradient(&self, i: usize, c: &DVector<f64>, y: &DVector<f64>, sigma: &DVector<f64>) -> DVector<f64> {
        self.check_discounts(c);
        let agent = &self.agents[i];
        let l = self.layout;
        let eta = agent.value_of_time;
        let p = agent.population;
        let mut grad = DVector::zeros(l.dim());
        for (e, edge) in self.network.edges().iter().enumerate() {
            grad[l.phi(e)] = eta * p * (edge.latency(sigma[e]) + edge.b * p * y[l.phi(e)]);
        }
        for v in 0..l.n_nodes {
            let lm = 2.0 * eta * agent.last_mile_weights[v] * (y[l.charge(v)] + y[l.park(v)] - self.target_share(i, v));
            grad[l.charge(v)] = lm;
            grad[l.park(v)] = lm;
        }
        for (k, &v) in self.network.charge_nodes().iter().enumerate() {
            grad[l.charge(v)] += agent.energy_demand * (self.prices.charge[k] - c[self.discounts.charge(i, k)]);
        }
        for (k, &v) in self.network.park_nodes().iter().enumerate() {
            grad[l.park(v)] += self.prices.park[k] - c[self.discounts.park(i, k)];
        }
        grad
    }

    /// Pseudo-gradient blocks `F_i(c, σ(y))`.
    pub fn pseudo_gradient(&self, c: &DVector<f64>, profile: &[DVector<f64>]) -> Vec<DVector<f64>> {
        let sigma = self.aggregate_flow(profile);
        (0..self.agents.len()).map(|i| self.agent_gradient(i, c, &profile[i], &sigma)).collect()
    }

    /// `∂F_i/∂y_i` with `σ` held fixed.
    pub fn own_jacobian(&self, i: usize) -> DMatrix<f64> {
        let n = self.layout.dim();
        self.own_jacobian_apply(i, &DMatrix::identity(n, n))
    }

    /// `(∂F_i/∂y_i) x` using the diagonal-plus-2×2 structure.
    pub fn own_jacobian_apply(&self, i: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        let agent = &self.agents[i];
        let l = self.layout;
        let eta = agent.value_of_time;
        let p = agent.population;
        let mut out = DMatrix::zeros(l.dim(), x.ncols());
        for (e, edge) in self.network.edges().iter().enumerate() {
            let d = eta * p * p * edge.b;
            if d != 0.0 {
                out.row_mut(l.phi(e)).copy_from(&(x.row(l.phi(e)) * d));
            }
        }
        for v in 0..l.n_nodes {
            let w = 2.0 * eta * agent.last_mile_weights[v];
            let sum = x.row(l.charge(v)) + x.row(l.park(v));
            let scaled = sum * w;
            out.row_mut(l.charge(v)).copy_from(&scaled);
            out.row_mut(l.park(v)).copy_from(&scaled);
        }
        out
    }

    /// `∂F_i/∂σ`, an `n_i × n_e` matrix with `η_i P_i b_ε` on the φ rows.
    pub fn sigma_jacobian(&self, i: usize) -> DMatrix<f64> {
        let ne = self.layout.n_edges;
        self.sigma_jacobian_apply(i, &DMatrix::identity(ne, ne))
    }

    /// `(∂F_i/∂σ) x` for an `n_e × p` block `x`.
    pub fn sigma_jacobian_apply(&self, i: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        let agent = &self.agents[i];
        let scale = agent.value_of_time * agent.population;
        let mut out = DMatrix::zeros(self.layout.dim(), x.ncols());
        for (e, edge) in self.network.edges().iter().enumerate() {
            if edge.b != 0.0 {
                out.row_mut(self.layout.phi(e)).copy_from(&(x.row(e) * (scale * edge.b)));
            }
        }
        out
    }

    /// Non-zero entries `(row, column, value)` of `∂F_i/∂c`.
    pub fn discount_jacobian_entries(&self, i: usize) -> Vec<(usize, usize, f64)> {
        let agent = &self.agents[i];
        let l = self.layout;
        let mut entries = Vec::new();
        for (k, &v) in self.network.charge_nodes().iter().enumerate() {
            entries.push((l.charge(v), self.discounts.charge(i, k), -agent.energy_demand));
        }
        for (k, &v) in self.network.park_nodes().iter().enumerate() {
            entries.push((l.park(v), self.discounts.park(i, k), -1.0));
        }
        entries
    }

    /// `∂F_i/∂c`, an `n_i × m` matrix.
    pub fn discount_jacobian(&self, i: usize) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.layout.dim(), self.discounts.dim());
        for (r, col, v) in self.discount_jacobian_entries(i) {
            out[(r, col)] += v;
        }
        out
    }

    /// The constant Jacobian `JF` of the stacked pseudo-gradient in `y`.
    pub fn full_jacobian(&self) -> DMatrix<f64> {
        let ni = self.layout.dim();
        let n = self.total_dim();
        let mut jf = DMatrix::zeros(n, n);
        for i in 0..self.agents.len() {
            jf.view_mut((i * ni, i * ni), (ni, ni)).copy_from(&self.own_jacobian(i));
            let agent = &self.agents[i];
            for (k, other) in self.agents.iter().enumerate() {
                for (e, edge) in self.network.edges().iter().enumerate() {
                    let r = i * ni + self.layout.phi(e);
                    let col = k * ni + self.layout.phi(e);
                    jf[(r, col)] += agent.value_of_time * agent.population * edge.b * other.population;
                }
            }
        }
        jf
    }

    /// Stacked indices of coordinates not pinned by the box bounds.
    pub fn free_coordinates(&self) -> Vec<usize> {
        let ni = self.layout.dim();
        self.polyhedra
            .iter()
            .enumerate()
            .flat_map(|(i, p)| p.free().iter().map(move |&k| i * ni + k).collect::<Vec<_>>())
            .collect()
    }

    pub fn monotonicity_certificate(&self) -> MonotonicityReport {
        certificate::certify(self)
    }

    /// The step that makes the projected iteration contract fastest, or
    /// `None` when no step contracts.
    pub fn contraction_step(&self) -> Option<ContractionStep> {
        certificate::contraction_step(self)
    }

    /// Per-agent projection of the all-½ strategy, the default starting profile.
    pub fn default_start(&self) -> Result<Vec<DVector<f64>>> {
        let settings = ProjectionSettings::default();
        let half = DVector::from_element(self.layout.dim(), 0.5);
        self.polyhedra.iter().map(|p| Ok(project(p, &half, &settings)?.point)).collect()
    }
}

fn validate_agent(i: usize, agent: &AgentClass, network: &RoadNetwork) -> Result<()> {
    let bad = |msg: String| Err(Error::Validation(format!("agent {i}: {msg}")));
    let nv = network.n_nodes();
    if agent.origin >= nv || agent.destination >= nv {
        return bad(format!("origin {} / destination {} outside 0..{nv}", agent.origin, agent.destination));
    }
    if agent.origin == agent.destination {
        return bad("origin equals destination".into());
    }
    if !(agent.population > 0.0) || !agent.population.is_finite() {
        return bad(format!("population must be positive, got {}", agent.population));
    }
    if !(agent.value_of_time > 0.0) {
        return bad(format!("value of time must be positive, got {}", agent.value_of_time));
    }
    if !(agent.energy_demand >= 0.0) {
        return bad(format!("energy demand must be non-negative, got {}", agent.energy_demand));
    }
    if !(0.0..=1.0).contains(&agent.min_charge_fraction) {
        return bad(format!("minimum charging fraction {} outside [0, 1]", agent.min_charge_fraction));
    }
    if agent.kind == AgentKind::Fv && agent.min_charge_fraction != 0.0 {
        return bad("fuel vehicles cannot have a minimum charging fraction".into());
    }
    if agent.charge_slots.len() != network.charge_nodes().len() || agent.park_slots.len() != network.park_nodes().len()
    {
        return bad(format!(
            "slot vectors have lengths {} and {}, expected {} and {}",
            agent.charge_slots.len(),
            agent.park_slots.len(),
            network.charge_nodes().len(),
            network.park_nodes().len()
        ));
    }
    if let Some(d) = agent.charge_slots.iter().chain(&agent.park_slots).find(|d| !(**d > 0.0)) {
        return bad(format!("slot caps must be positive, got {d}"));
    }
    if agent.last_mile_weights.len() != nv {
        return bad(format!("{} last-mile weights for {nv} nodes", agent.last_mile_weights.len()));
    }
    if let Some(w) = agent.last_mile_weights.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
        return bad(format!("last-mile weights must be positive, got {w}"));
    }
    Ok(())
}

/// Flow conservation at every node, the minimum-charge row, slot caps and the box.
pub fn build_feasible_polyhedron(i: usize, agent: &AgentClass, network: &RoadNetwork) -> Result<Polyhedron> {
    let l = StrategyLayout { n_edges: network.n_edges(), n_nodes: network.n_nodes() };
    let n = l.dim();
    let nv = l.n_nodes;
    let pev = agent.kind == AgentKind::Pev;

    let charge_cap: f64 =
        if pev { agent.charge_slots.iter().map(|d| (d / agent.population).min(1.0)).sum() } else { 0.0 };
    let park_cap: f64 = agent.park_slots.iter().map(|d| (d / agent.population).min(1.0)).sum();
    if pev && agent.min_charge_fraction > charge_cap + 1e-12 {
        return Err(Error::Infeasible {
            agent: i,
            reason: format!(
                "minimum charging fraction {} exceeds the charging slots ({charge_cap:.4} of the class)",
                agent.min_charge_fraction
            ),
        });
    }
    if charge_cap + park_cap < 1.0 - 1e-12 {
        return Err(Error::Infeasible {
            agent: i,
            reason: format!("facility slots hold only {:.4} of the class", charge_cap + park_cap),
        });
    }

    let mut a_eq = DMatrix::zeros(nv, n);
    let mut b_eq = DVector::zeros(nv);
    for v in 0..nv {
        for &e in network.in_edges(v) {
            a_eq[(v, l.phi(e))] += 1.0;
        }
        for &e in network.out_edges(v) {
            a_eq[(v, l.phi(e))] -= 1.0;
        }
        a_eq[(v, l.charge(v))] = -1.0;
        a_eq[(v, l.park(v))] = -1.0;
        if v == agent.origin {
            b_eq[v] = -1.0;
        }
    }

    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    if pev {
        let terms = network.charge_nodes().iter().map(|&v| (l.charge(v), -1.0)).collect();
        rows.push((terms, -agent.min_charge_fraction));
        for (k, &v) in network.charge_nodes().iter().enumerate() {
            rows.push((vec![(l.charge(v), agent.population)], agent.charge_slots[k]));
        }
    }
    for (k, &v) in network.park_nodes().iter().enumerate() {
        rows.push((vec![(l.park(v), agent.population)], agent.park_slots[k]));
    }
    let mut a_in = DMatrix::zeros(rows.len(), n);
    let mut b_in = DVector::zeros(rows.len());
    for (r, (terms, rhs)) in rows.into_iter().enumerate() {
        for (col, v) in terms {
            a_in[(r, col)] = v;
        }
        b_in[r] = rhs;
    }

    let lower = DVector::zeros(n);
    let mut upper = DVector::zeros(n);
    for e in 0..l.n_edges {
        upper[l.phi(e)] = 1.0;
    }
    if pev {
        for &v in network.charge_nodes() {
            upper[l.charge(v)] = 1.0;
        }
    }
    for &v in network.park_nodes() {
        upper[l.park(v)] = 1.0;
    }

    Polyhedron::new(a_eq, b_eq, a_in, b_in, lower, upper)
        .map_err(|e| Error::Infeasible { agent: i, reason: e.to_string() })
}

#[cfg(test)]
mod tests;
