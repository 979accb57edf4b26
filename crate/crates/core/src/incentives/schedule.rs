use serde::{Deserialize, Serialize};

/// Step sizes `α^k = α₀/(k+1)^p` and inner tolerances `σ^k = σ₀/(k+1)^q`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    /// Initial step; `None` selects it by backtracking at the first iteration.
    pub alpha0: Option<f64>,
    pub p: f64,
    pub sigma0: f64,
    pub q: f64,
    /// Lower bound on the inner tolerance.
    #[serde(default)]
    pub sigma_floor: f64,
}

impl Default for Schedules {
    fn default() -> Self {
        Self { alpha0: None, p: 1.0, sigma0: 1e-4, q: 0.5, sigma_floor: 1e-10 }
    }
}

impl Schedules {
    pub fn alpha(&self, alpha0: f64, k: usize) -> f64 {
        alpha0 / ((k + 1) as f64).powf(self.p)
    }

    pub fn sigma(&self, k: usize) -> f64 {
        (self.sigma0 / ((k + 1) as f64).powf(self.q)).max(self.sigma_floor)
    }
}

/// Checks the conditions for convergence of the inexact outer loop: the steps
/// are non-summable and square-summable (`p ∈ (½, 1]`) and `Σ α^k σ^k < ∞`
/// (`p + q > 1`). Returns the list of violations.
pub fn validate_schedules(s: &Schedules) -> Vec<String> {
    let mut out = Vec::new();
    if let Some(a) = s.alpha0 {
        if !(a >= 0.0) {
            out.push(format!("alpha0 = {a} is negative"));
        }
    }
    if !(s.sigma0 >= 0.0) {
        out.push(format!("sigma0 = {} is negative", s.sigma0));
    }
    if !(s.p > 0.5) {
        out.push(format!("p = {} ≤ 1/2: steps are not square-summable", s.p));
    }
    if !(s.p <= 1.0) {
        out.push(format!("p = {} > 1: steps are summable", s.p));
    }
    if !(s.p + s.q > 1.0) {
        out.push(format!("p + q = {} ≤ 1: Σ α^k σ^k diverges", s.p + s.q));
    }
    out
}
