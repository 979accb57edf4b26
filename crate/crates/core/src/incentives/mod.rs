//! Traffic-authority side: objectives, budget penalty, discount projection
//! and the hypergradient outer loop.

mod outer;
mod schedule;

pub use outer::{implicit_objective, outer_loop, solve_with_budget, OuterOptions, OuterRow, SolveReport};
pub use schedule::{validate_schedules, Schedules};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::agents::{DiscountLayout, Game};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// Total travel time on the targeted edges plus the budget penalty.
    #[default]
    Ttt,
    /// Negative facility revenue plus the budget penalty.
    Revenue,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DiscountMode {
    /// One discount per class and facility.
    #[default]
    Personalized,
    /// The same discount for every class at a facility.
    Uniform,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaProblem {
    /// Edge indices whose travel time the authority wants to reduce.
    pub decongestion_edges: Vec<usize>,
    /// Budget in dollars. Zero forces all discounts to zero.
    pub budget: f64,
    /// Weight of the squared budget excess.
    pub mu: f64,
    /// Upper bounds `θ · c̄` on each discount, in the discount layout.
    pub caps: DVector<f64>,
    pub objective: Objective,
    pub mode: DiscountMode,
}

impl TaProblem {
    /// Caps from per-entry fractions `θ ∈ (0, 1)` of the facility prices.
    pub fn new(
        game: &Game,
        decongestion_edges: Vec<usize>,
        budget: f64,
        mu: f64,
        theta: &DVector<f64>,
        objective: Objective,
        mode: DiscountMode,
    ) -> Result<Self> {
        let layout = game.discount_layout();
        if theta.len() != layout.dim() {
            return Err(Error::Dimension(format!("{} cap fractions, expected {}", theta.len(), layout.dim())));
        }
        if let Some(t) = theta.iter().find(|t| !(**t > 0.0 && **t < 1.0)) {
            return Err(Error::Config(format!("cap fraction {t} outside (0, 1)")));
        }
        let prices = facility_prices(game);
        let caps = theta.component_mul(&prices);
        let problem = Self { decongestion_edges, budget, mu, caps, objective, mode };
        problem.validate(game)?;
        Ok(problem)
    }

    /// The same cap fraction for every charging entry and for every parking entry.
    pub fn fractions(game: &Game, theta_charge: f64, theta_park: f64) -> DVector<f64> {
        let layout = game.discount_layout();
        let mut theta = DVector::zeros(layout.dim());
        for i in 0..layout.n_agents {
            for k in 0..layout.n_charge {
                theta[layout.charge(i, k)] = theta_charge;
            }
            for k in 0..layout.n_park {
                theta[layout.park(i, k)] = theta_park;
            }
        }
        theta
    }

    pub fn validate(&self, game: &Game) -> Result<()> {
        let ne = game.network().n_edges();
        if let Some(e) = self.decongestion_edges.iter().find(|e| **e >= ne) {
            return Err(Error::Config(format!("decongestion edge {e} outside 0..{ne}")));
        }
        if !(self.budget >= 0.0 && self.budget.is_finite()) {
            return Err(Error::Config(format!("budget must be non-negative, got {}", self.budget)));
        }
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(Error::Config(format!("penalty weight must be positive, got {}", self.mu)));
        }
        if self.caps.len() != game.discount_layout().dim() || self.caps.iter().any(|c| !(*c >= 0.0)) {
            return Err(Error::Config("caps must be non-negative and match the discount layout".into()));
        }
        Ok(())
    }

    pub fn max_cap(&self) -> f64 {
        self.caps.iter().fold(0.0, |m, c| m.max(*c))
    }

    pub fn with_mu(&self, mu: f64) -> Self {
        Self { mu, ..self.clone() }
    }
}

/// List prices `c̄` laid out like the discounts.
pub fn facility_prices(game: &Game) -> DVector<f64> {
    let layout = game.discount_layout();
    let prices = game.prices();
    let mut out = DVector::zeros(layout.dim());
    for i in 0..layout.n_agents {
        for k in 0..layout.n_charge {
            out[layout.charge(i, k)] = prices.charge[k];
        }
        for k in 0..layout.n_park {
            out[layout.park(i, k)] = prices.park[k];
        }
    }
    out
}

/// `Σ_{ε ∈ E_D} (h_ε + σ_ε)(a_ε + b_ε(h_ε + σ_ε))`, in vehicle-hours.
pub fn ttt(game: &Game, sigma: &DVector<f64>, edges: &[usize]) -> f64 {
    edges
        .iter()
        .map(|&e| {
            let edge = game.network().edge(e);
            let x = edge.h + sigma[e];
            x * (edge.a + edge.b * x)
        })
        .sum()
}

/// Dollars paid out: `Σ_i Σ_j q_i g^c_{ij} c^c_{ij} + P_i g^p_{ij} c^p_{ij}`.
pub fn budget_spend(game: &Game, c: &DVector<f64>, profile: &[DVector<f64>]) -> f64 {
    let weights = spend_weights(game, profile);
    weights.dot(c)
}

/// `max(spend − C, 0)²`.
pub fn budget_penalty(game: &Game, c: &DVector<f64>, profile: &[DVector<f64>], budget: f64) -> f64 {
    (budget_spend(game, c, profile) - budget).max(0.0).powi(2)
}

/// `∂ spend / ∂c`: the quantity each discount applies to.
fn spend_weights(game: &Game, profile: &[DVector<f64>]) -> DVector<f64> {
    let layout = game.discount_layout();
    let l = game.layout();
    let net = game.network();
    let mut w = DVector::zeros(layout.dim());
    for (i, y) in profile.iter().enumerate() {
        let agent = game.agent(i);
        for (k, &v) in net.charge_nodes().iter().enumerate() {
            w[layout.charge(i, k)] = agent.energy_demand * y[l.charge(v)];
        }
        for (k, &v) in net.park_nodes().iter().enumerate() {
            w[layout.park(i, k)] = agent.population * y[l.park(v)];
        }
    }
    w
}

/// `φ_TA(c, y)`.
pub fn ta_objective(game: &Game, c: &DVector<f64>, profile: &[DVector<f64>], problem: &TaProblem) -> f64 {
    let penalty = problem.mu * budget_penalty(game, c, profile, problem.budget);
    let sigma = game.aggregate_flow(profile);
    match problem.objective {
        Objective::Ttt => ttt(game, &sigma, &problem.decongestion_edges) + penalty,
        Objective::Revenue => {
            let revenue: f64 = (0..game.n_agents())
                .map(|i| {
                    let parts = game.cost_breakdown(i, c, &profile[i], &sigma);
                    parts.charging + parts.parking
                })
                .sum();
            penalty - revenue
        }
    }
}

/// `(∂φ_TA/∂c, ∂φ_TA/∂y)` with the other argument held fixed; the second is
/// returned per agent.
pub fn ta_partials(
    game: &Game,
    c: &DVector<f64>,
    profile: &[DVector<f64>],
    problem: &TaProblem,
) -> (DVector<f64>, Vec<DVector<f64>>) {
    let layout = game.discount_layout();
    let l = game.layout();
    let net = game.network();
    let weights = spend_weights(game, profile);
    let excess = (weights.dot(c) - problem.budget).max(0.0);
    let pen = 2.0 * problem.mu * excess;

    let mut d_c = &weights * pen;
    let mut d_y: Vec<DVector<f64>> = vec![DVector::zeros(l.dim()); game.n_agents()];
    for (i, g) in d_y.iter_mut().enumerate() {
        let agent = game.agent(i);
        for (k, &v) in net.charge_nodes().iter().enumerate() {
            g[l.charge(v)] += pen * agent.energy_demand * c[layout.charge(i, k)];
        }
        for (k, &v) in net.park_nodes().iter().enumerate() {
            g[l.park(v)] += pen * agent.population * c[layout.park(i, k)];
        }
    }
    match problem.objective {
        Objective::Ttt => {
            let sigma = game.aggregate_flow(profile);
            for &e in &problem.decongestion_edges {
                let edge = net.edge(e);
                let slope = edge.a + 2.0 * edge.b * (edge.h + sigma[e]);
                for (i, g) in d_y.iter_mut().enumerate() {
                    g[l.phi(e)] += game.agent(i).population * slope;
                }
            }
        }
        Objective::Revenue => {
            let prices = game.prices();
            for (i, (g, y)) in d_y.iter_mut().zip(profile).enumerate() {
                let agent = game.agent(i);
                for (k, &v) in net.charge_nodes().iter().enumerate() {
                    let idx = layout.charge(i, k);
                    g[l.charge(v)] -= agent.energy_demand * (prices.charge[k] - c[idx]);
                    d_c[idx] += agent.energy_demand * y[l.charge(v)];
                }
                for (k, &v) in net.park_nodes().iter().enumerate() {
                    let idx = layout.park(i, k);
                    g[l.park(v)] -= prices.park[k] - c[idx];
                    d_c[idx] += y[l.park(v)];
                }
            }
        }
    }
    (d_c, d_y)
}

/// `∇₁φ_TA + Σ_i s_iᵀ ∇₂ᵢφ_TA`.
pub fn hypergradient(
    game: &Game,
    c: &DVector<f64>,
    profile: &[DVector<f64>],
    sensitivity: &[DMatrix<f64>],
    problem: &TaProblem,
) -> DVector<f64> {
    let (mut g, d_y) = ta_partials(game, c, profile, problem);
    for (s, dy) in sensitivity.iter().zip(&d_y) {
        g += s.tr_mul(dy);
    }
    g
}

/// Projection onto `{0 ≤ c ≤ caps}`, intersected in uniform mode with the
/// subspace where every class gets the same discount at a facility.
///
/// The uniform projection replaces each facility's entries by the clamp of
/// their mean to `[0, min cap]`: on that line the squared distance is a
/// one-dimensional convex quadratic minimized at the mean.
pub fn project_discounts(
    c: &DVector<f64>,
    caps: &DVector<f64>,
    mode: DiscountMode,
    layout: &DiscountLayout,
) -> DVector<f64> {
    match mode {
        DiscountMode::Personalized => c.zip_map(caps, |x, cap| x.clamp(0.0, cap)),
        DiscountMode::Uniform => {
            let mut out = c.clone();
            let n = layout.n_agents;
            if n == 0 {
                return out;
            }
            let groups = (0..layout.n_charge)
                .map(|k| (0..n).map(|i| layout.charge(i, k)).collect::<Vec<_>>())
                .chain((0..layout.n_park).map(|k| (0..n).map(|i| layout.park(i, k)).collect()));
            for idx in groups {
                let mean = idx.iter().map(|&j| c[j]).sum::<f64>() / n as f64;
                let cap = idx.iter().map(|&j| caps[j]).fold(f64::INFINITY, f64::min);
                let v = mean.clamp(0.0, cap);
                for j in idx {
                    out[j] = v;
                }
            }
            out
        }
    }
}
