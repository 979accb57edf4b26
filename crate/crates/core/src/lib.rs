//! Personalized parking and charging incentives for city traffic.
//!
//! A traffic authority picks per-class discounts on parking lots and charging
//! stations. Vehicle classes answer with the unique Nash equilibrium of an
//! aggregative routing game. The authority descends the hypergradient of its
//! objective, with the equilibrium sensitivity obtained by differentiating the
//! projected pseudo-gradient fixed-point map.
//!
//! Module map:
//! - [`network`]: TNTP ingestion, BPR linearization, road graph, free-flow distances.
//! - [`agents`]: vehicle classes, feasible polyhedra, costs, pseudo-gradient.
//! - [`projection`]: polyhedral projection and its Jacobian.
//! - [`equilibrium`]: the inner fixed-point loop with sensitivity propagation.
//! - [`incentives`]: authority objectives, hypergradient, outer loop.
//! - [`harness`]: scenarios, verification oracles, experiment drivers.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agents;
pub mod equilibrium;
pub mod error;
pub mod harness;
pub mod incentives;
pub mod linalg;
pub mod network;
pub mod projection;

pub use error::{Error, Result};
