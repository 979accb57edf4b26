//! Strong-monotonicity certificate for the pseudo-gradient.
//!
//! After permuting coordinates, `JF = diag(M_φ, M_g)`. `M_φ` splits into one
//! `N × N` block per edge, `b_ε A` with `A_ik = η_i P_i P_k (1 + [i = k])`.
//! `M_g` splits into one 2×2 block `2 η_i W_i[v] [[1, 1], [1, 1]]` per agent
//! and node, restricted to the coordinates that are not pinned. The 2×2 block
//! is singular, so `JF` is never positive definite on the full space; the
//! certificate is taken on the free coordinates, which is where the
//! projected iteration moves.

use nalgebra::DMatrix;

use super::{AgentKind, Game};
use crate::linalg::{spectral_norm, symmetric_part_min_eigenvalue};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonicityReport {
    /// Minimum eigenvalue of `½(JF + JFᵀ)` restricted to free coordinates.
    pub min_eigenvalue: f64,
    /// Minimum eigenvalue of the symmetrized φ block.
    pub phi_block_min: f64,
    /// Minimum eigenvalue of the g block on free coordinates.
    pub g_block_min: f64,
    /// Minimum eigenvalue of `½(JF + JFᵀ)` on all coordinates, pinned ones included.
    pub full_space_min: f64,
    /// Spectral norm of `JF` restricted to free coordinates.
    pub lipschitz: f64,
    /// Spectral norm of the φ block.
    pub phi_lipschitz: f64,
    /// Spectral norm of the g block on free coordinates.
    pub g_lipschitz: f64,
}

impl MonotonicityReport {
    pub fn strongly_monotone(&self) -> bool {
        self.min_eigenvalue > 0.0
    }

    /// `μ / L²`, the classical projected-gradient step for a strongly
    /// monotone affine map.
    ///
    /// When a class has charging and parking at the same node the g block is
    /// only positive semidefinite and `μ = 0`. The map is then still
    /// cocoercive, the φ block with modulus `μ_φ / L_φ²` and the symmetric
    /// g block with `1 / L_g`, and the smaller modulus is returned. `None`
    /// when the φ block is not strongly monotone either.
    pub fn default_gamma(&self) -> Option<f64> {
        if self.strongly_monotone() && self.lipschitz > 0.0 {
            return Some(self.min_eigenvalue / (self.lipschitz * self.lipschitz));
        }
        if !(self.phi_block_min > 0.0) || self.g_block_min < 0.0 {
            return None;
        }
        let phi = if self.phi_block_min.is_finite() {
            self.phi_block_min / (self.phi_lipschitz * self.phi_lipschitz)
        } else {
            f64::INFINITY
        };
        let g = if self.g_lipschitz > 0.0 { 1.0 / self.g_lipschitz } else { f64::INFINITY };
        let step = phi.min(g);
        step.is_finite().then_some(step)
    }
}

pub(super) fn certify(game: &Game) -> MonotonicityReport {
    let agents = game.agents();
    let n_agents = agents.len();
    let l = game.layout();

    let (phi_min, phi_norm) = if n_agents == 0 || l.n_edges == 0 {
        (f64::INFINITY, 0.0)
    } else {
        let a = DMatrix::from_fn(n_agents, n_agents, |i, k| {
            let diag = if i == k { 2.0 } else { 1.0 };
            agents[i].value_of_time * agents[i].population * agents[k].population * diag
        });
        let lam = symmetric_part_min_eigenvalue(&a);
        let norm = spectral_norm(&a);
        let bs = game.network().edges().iter().map(|e| e.b);
        let b_min = bs.clone().fold(f64::INFINITY, f64::min);
        let b_max = bs.fold(0.0f64, f64::max);
        let min = if lam >= 0.0 { b_min * lam } else { b_max * lam };
        (min, b_max * norm)
    };

    let mut g_min = f64::INFINITY;
    let mut g_norm = 0.0f64;
    let mut has_g = false;
    for (i, agent) in agents.iter().enumerate() {
        let poly = game.polyhedron(i);
        for v in 0..l.n_nodes {
            has_g = true;
            let w = 2.0 * agent.value_of_time * agent.last_mile_weights[v];
            let charge_free = agent.kind == AgentKind::Pev && poly.upper()[l.charge(v)] > poly.lower()[l.charge(v)];
            let park_free = poly.upper()[l.park(v)] > poly.lower()[l.park(v)];
            match (charge_free, park_free) {
                (true, true) => {
                    g_min = g_min.min(0.0);
                    g_norm = g_norm.max(2.0 * w);
                }
                (true, false) | (false, true) => {
                    g_min = g_min.min(w);
                    g_norm = g_norm.max(w);
                }
                (false, false) => {}
            }
        }
    }
    let full_g_min = if has_g { 0.0 } else { f64::INFINITY };

    MonotonicityReport {
        min_eigenvalue: phi_min.min(g_min),
        phi_block_min: phi_min,
        g_block_min: g_min,
        full_space_min: phi_min.min(full_g_min),
        lipschitz: phi_norm.max(g_norm),
        phi_lipschitz: phi_norm,
        g_lipschitz: g_norm,
    }
}

/// Step minimizing the Lipschitz constant `ρ(γ) = ‖I − γ JF‖₂` of the
/// forward step on the free coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContractionStep {
    pub gamma: f64,
    /// `ρ(γ)`, the linear rate of the projected iteration.
    pub rate: f64,
}

/// Minimizes `ρ(γ)` using the block structure of `JF`. The edge blocks are
/// `b_ε A`, so by convexity in `b_ε` only `b_min` and `b_max` matter; the g
/// blocks are symmetric and contribute `|1 − γλ|` for their extreme non-zero
/// eigenvalues. Zero blocks (edges with `b = 0`, null directions of the g
/// blocks) are nonexpansive for every `γ` and are left out. `ρ` is convex
/// in `γ`, so a golden-section search on `(0, 2/L)` finds the minimum.
pub(super) fn contraction_step(game: &Game) -> Option<ContractionStep> {
    let agents = game.agents();
    let l = game.layout();
    if agents.is_empty() {
        return None;
    }
    let n_agents = agents.len();
    let a = DMatrix::from_fn(n_agents, n_agents, |i, k| {
        let diag = if i == k { 2.0 } else { 1.0 };
        agents[i].value_of_time * agents[i].population * agents[k].population * diag
    });
    let bs: Vec<f64> = game.network().edges().iter().map(|e| e.b).filter(|b| *b > 0.0).collect();
    let b_lo = bs.iter().copied().fold(f64::INFINITY, f64::min);
    let b_hi = bs.iter().copied().fold(0.0f64, f64::max);

    let mut g_lo = f64::INFINITY;
    let mut g_hi = 0.0f64;
    for (i, agent) in agents.iter().enumerate() {
        let poly = game.polyhedron(i);
        for v in 0..l.n_nodes {
            let w = 2.0 * agent.value_of_time * agent.last_mile_weights[v];
            let free = |k: usize| poly.upper()[k] > poly.lower()[k];
            let lam = match (free(l.charge(v)), free(l.park(v))) {
                (true, true) => 2.0 * w,
                (true, false) | (false, true) => w,
                (false, false) => continue,
            };
            g_lo = g_lo.min(lam);
            g_hi = g_hi.max(lam);
        }
    }

    let a_norm = spectral_norm(&a);
    let lipschitz = (b_hi * a_norm).max(g_hi);
    if !(lipschitz > 0.0) {
        return None;
    }
    let identity = DMatrix::<f64>::identity(n_agents, n_agents);
    let rho = |gamma: f64| {
        let mut r = 0.0f64;
        if !bs.is_empty() {
            r = r.max(spectral_norm(&(&identity - &a * (gamma * b_lo))));
            r = r.max(spectral_norm(&(&identity - &a * (gamma * b_hi))));
        }
        if g_hi > 0.0 {
            r = r.max((1.0 - gamma * g_lo).abs()).max((1.0 - gamma * g_hi).abs());
        }
        r
    };
    let (mut lo, mut hi) = (0.0, 2.0 / lipschitz);
    let phi = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - phi * (hi - lo);
    let mut x2 = lo + phi * (hi - lo);
    let (mut f1, mut f2) = (rho(x1), rho(x2));
    for _ in 0..100 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - phi * (hi - lo);
            f1 = rho(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + phi * (hi - lo);
            f2 = rho(x2);
        }
    }
    let gamma = 0.5 * (lo + hi);
    let rate = rho(gamma);
    (rate < 1.0).then_some(ContractionStep { gamma, rate })
}
