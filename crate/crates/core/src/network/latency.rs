use serde::{Deserialize, Serialize};

use super::tntp::RawTntpEdge;
use crate::error::{Error, Result};

/// Affine latency `t(x) = a + b x` in hours, `x` in vehicles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineLatency {
    pub a: f64,
    pub b: f64,
}

/// Lower bound on `a` relative to the free-flow time.
pub const FREE_FLOW_FLOOR: f64 = 1e-6;

/// BPR travel time `fft * (1 + k (x / cap)^p)`.
pub fn bpr_time(edge: &RawTntpEdge, flow: f64) -> f64 {
    edge.free_flow_time * (1.0 + edge.bpr_coefficient * (flow / edge.capacity).powf(edge.bpr_power))
}

/// Derivative of [`bpr_time`] in the flow.
pub fn bpr_slope(edge: &RawTntpEdge, flow: f64) -> f64 {
    let p = edge.bpr_power;
    edge.free_flow_time * edge.bpr_coefficient * p * flow.powf(p - 1.0) / edge.capacity.powf(p)
}

/// Tangent of the BPR curve at `reference_flow`, re-centred so that
/// `t_lin(x) = a + b x`. `a` is floored at `fft * 1e-6` and `b` at zero.
pub fn linearize_latency(edge: &RawTntpEdge, reference_flow: f64) -> Result<AffineLatency> {
    if !(edge.bpr_power >= 1.0) {
        return Err(Error::UnsupportedExponent(edge.bpr_power));
    }
    if !(reference_flow >= 0.0) {
        return Err(Error::Validation(format!("reference flow must be non-negative, got {reference_flow}")));
    }
    if edge.bpr_power == 1.0 {
        // Already affine.
        return Ok(AffineLatency {
            a: edge.free_flow_time,
            b: (edge.free_flow_time * edge.bpr_coefficient / edge.capacity).max(0.0),
        });
    }
    let b = bpr_slope(edge, reference_flow).max(0.0);
    let a = bpr_time(edge, reference_flow) - b * reference_flow;
    Ok(AffineLatency { a: a.max(edge.free_flow_time * FREE_FLOW_FLOOR), b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn edge(fft: f64, k: f64, p: f64, cap: f64) -> RawTntpEdge {
        RawTntpEdge {
            tail: 1,
            head: 2,
            capacity: cap,
            length: 1.0,
            free_flow_time: fft,
            bpr_coefficient: k,
            bpr_power: p,
            recorded_flow: None,
        }
    }

    #[test]
    fn tangent_at_zero_flow_is_flat() {
        let lin = linearize_latency(&edge(1.0, 0.15, 4.0, 100.0), 0.0).unwrap();
        assert_eq!(lin, AffineLatency { a: 1.0, b: 0.0 });
    }

    #[test]
    fn tangent_at_capacity() {
        // t(100) = 1.15, t'(100) = 0.15 * 4 / 100 = 0.006
        let lin = linearize_latency(&edge(1.0, 0.15, 4.0, 100.0), 100.0).unwrap();
        assert_relative_eq!(lin.b, 0.006, epsilon = 1e-15);
        assert_relative_eq!(lin.a, 0.55, epsilon = 1e-14);
    }

    #[test]
    fn affine_bpr_is_returned_verbatim() {
        for x in [0.0, 10.0, 1e4] {
            let lin = linearize_latency(&edge(2.0, 0.15, 1.0, 50.0), x).unwrap();
            assert_eq!(lin.a, 2.0);
            assert_eq!(lin.b, 2.0 * 0.15 / 50.0);
        }
    }

    #[test]
    fn clamp_keeps_free_flow_positive() {
        // steep curve far past capacity drives the intercept negative
        let lin = linearize_latency(&edge(1.0, 1.0, 4.0, 10.0), 100.0).unwrap();
        assert_eq!(lin.a, FREE_FLOW_FLOOR);
        assert!(lin.b > 0.0);
    }

    #[test]
    fn sub_linear_power_is_unsupported() {
        assert!(matches!(linearize_latency(&edge(1.0, 0.15, 0.5, 10.0), 1.0), Err(Error::UnsupportedExponent(_))));
    }

    proptest! {
        #[test]
        fn tangent_matches_bpr_value_and_slope(
            fft in 0.01f64..5.0, k in 0.0f64..1.0, p in 1.0f64..6.0,
            cap in 10.0f64..5000.0, frac in 0.0f64..1.5,
        ) {
            let e = edge(fft, k, p, cap);
            let x = frac * cap;
            let lin = linearize_latency(&e, x).unwrap();
            let intercept = bpr_time(&e, x) - bpr_slope(&e, x) * x;
            if intercept >= fft * FREE_FLOW_FLOOR {
                prop_assert!((lin.a + lin.b * x - bpr_time(&e, x)).abs() <= 1e-10 * bpr_time(&e, x));
                prop_assert!((lin.b - bpr_slope(&e, x)).abs() <= 1e-12 * (1.0 + bpr_slope(&e, x)));
            }
        }
    }
}
