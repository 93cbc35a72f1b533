//! Rényi-DP accounting for the Gaussian mechanism.
//!
//! Accounting is conservative: subsampling amplification is not applied, so the
//! sampling rate is recorded but does not reduce the reported ε.

use serde::{Deserialize, Serialize};

use super::DpError;

/// Fixed grid of Rényi orders α.
pub const RDP_ORDERS: [f64; 10] = [1.25, 1.5, 2.0, 3.0, 4.0, 6.0, 8.0, 16.0, 32.0, 64.0];

/// RDP values indexed by [`RDP_ORDERS`]. Composition is element-wise addition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdpCurve {
    pub values: [f64; 10],
}

impl RdpCurve {
    pub fn zero() -> Self {
        RdpCurve { values: [0.0; 10] }
    }

    pub fn compose(&self, other: &RdpCurve) -> RdpCurve {
        let mut values = self.values;
        for (v, o) in values.iter_mut().zip(other.values.iter()) {
            *v += o;
        }
        RdpCurve { values }
    }

    pub fn orders(&self) -> &'static [f64; 10] {
        &RDP_ORDERS
    }
}

impl Default for RdpCurve {
    fn default() -> Self {
        Self::zero()
    }
}

impl std::ops::Add for RdpCurve {
    type Output = RdpCurve;
    fn add(self, rhs: RdpCurve) -> RdpCurve {
        self.compose(&rhs)
    }
}

/// RDP of `steps` compositions of the Gaussian mechanism with the given noise
/// multiplier: `T · α / (2σ²)`.
pub fn rdp_compose_gaussian(noise_multiplier: f64, steps: u64, sampling_rate: f64) -> Result<RdpCurve, DpError> {
    if !(noise_multiplier > 0.0) || !noise_multiplier.is_finite() {
        return Err(DpError::InvalidParameter(format!(
            "noise multiplier must be positive (got {noise_multiplier}); zero noise means infinite ε"
        )));
    }
    if !(sampling_rate > 0.0 && sampling_rate <= 1.0) {
        return Err(DpError::InvalidParameter(format!("sampling rate {sampling_rate} outside (0, 1]")));
    }
    let mut values = [0.0; 10];
    let t = steps as f64;
    for (v, alpha) in values.iter_mut().zip(RDP_ORDERS.iter()) {
        *v = t * alpha / (2.0 * noise_multiplier * noise_multiplier);
    }
    Ok(RdpCurve { values })
}

/// Converts an RDP curve to (ε, δ)-DP: `min_α RDP(α) + ln(1/δ)/(α − 1)`.
pub fn to_epsilon(curve: &RdpCurve, delta: f64) -> f64 {
    to_epsilon_with_order(curve, delta).0
}

/// Like [`to_epsilon`], also returning the order that attains the minimum.
pub fn to_epsilon_with_order(curve: &RdpCurve, delta: f64) -> (f64, f64) {
    let log_inv_delta = (1.0 / delta).ln();
    let mut best = (f64::INFINITY, RDP_ORDERS[0]);
    for (rdp, alpha) in curve.values.iter().zip(RDP_ORDERS.iter()) {
        let eps = rdp + log_inv_delta / (alpha - 1.0);
        if eps < best.0 {
            best = (eps, *alpha);
        }
    }
    best
}

/// ε of a DP-SGD run; infinite when no noise is added.
pub fn dp_sgd_epsilon(noise_multiplier: f64, steps: u64, sampling_rate: f64, delta: f64) -> f64 {
    if steps == 0 {
        return to_epsilon(&RdpCurve::zero(), delta);
    }
    match rdp_compose_gaussian(noise_multiplier, steps, sampling_rate) {
        Ok(curve) => to_epsilon(&curve, delta),
        Err(_) => f64::INFINITY,
    }
}

/// Smallest noise multiplier whose `steps`-fold composition stays within
/// `target_epsilon` at `delta`. `None` if the target is below the zero-step floor.
pub fn calibrate_noise_multiplier(target_epsilon: f64, steps: u64, delta: f64) -> Option<f64> {
    let floor = to_epsilon(&RdpCurve::zero(), delta);
    if steps == 0 {
        return (target_epsilon >= floor).then_some(1.0);
    }
    if !(target_epsilon > floor) {
        return None;
    }
    let eps = |sigma: f64| dp_sgd_epsilon(sigma, steps, 1.0, delta);
    let (mut lo, mut hi) = (1e-3, 1.0);
    while eps(hi) > target_epsilon {
        hi *= 2.0;
        if hi > 1e9 {
            return None;
        }
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if eps(mid) > target_epsilon {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(hi)
}

/// Serialized record of a Gaussian accounting decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountingReceipt {
    pub noise_multiplier: f64,
    #[serde(rename = "C")]
    pub clip_norm: f64,
    #[serde(rename = "T")]
    pub steps: u64,
    pub q: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub orders_used: Vec<f64>,
}

impl AccountingReceipt {
    pub fn gaussian(noise_multiplier: f64, clip_norm: f64, steps: u64, q: f64, delta: f64) -> Self {
        let (epsilon, order) = if steps == 0 {
            to_epsilon_with_order(&RdpCurve::zero(), delta)
        } else {
            match rdp_compose_gaussian(noise_multiplier, steps, q) {
                Ok(c) => to_epsilon_with_order(&c, delta),
                Err(_) => (f64::INFINITY, f64::NAN),
            }
        };
        let orders_used = if order.is_nan() { Vec::new() } else { vec![order] };
        AccountingReceipt { noise_multiplier, clip_norm, steps, q, delta, epsilon, orders_used }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_steps_is_zero_curve() {
        let c = rdp_compose_gaussian(1.3, 0, 0.1).unwrap();
        assert_eq!(c, RdpCurve::zero());
    }

    #[test]
    fn order_two_unit_noise_single_step() {
        let c = rdp_compose_gaussian(1.0, 1, 1.0).unwrap();
        assert_eq!(c.values[2], 1.0);
    }

    #[test]
    fn linear_in_steps() {
        let a = rdp_compose_gaussian(1.7, 60, 0.5).unwrap();
        let b = rdp_compose_gaussian(1.7, 40, 0.5).unwrap();
        let c = rdp_compose_gaussian(1.7, 100, 0.5).unwrap();
        let ab = a + b;
        for i in 0..10 {
            assert!((ab.values[i] - c.values[i]).abs() <= 1e-12 * c.values[i]);
        }
    }

    #[test]
    fn zero_noise_is_rejected() {
        assert!(rdp_compose_gaussian(0.0, 10, 1.0).is_err());
        assert_eq!(dp_sgd_epsilon(0.0, 10, 1.0, 1e-5), f64::INFINITY);
    }

    #[test]
    fn zero_curve_epsilon_is_grid_minimum() {
        let delta = 1e-5;
        assert_eq!(to_epsilon(&RdpCurve::zero(), delta), (1.0f64 / delta).ln() / 63.0);
    }

    #[test]
    fn monotone_in_noise() {
        assert!(dp_sgd_epsilon(2.0, 100, 1.0, 1e-5) < dp_sgd_epsilon(1.0, 100, 1.0, 1e-5));
    }

    #[test]
    fn calibration_hits_target() {
        for target in [0.5, 1.0, 2.0, 4.0, 8.0] {
            let sigma = calibrate_noise_multiplier(target, 50, 1e-5).unwrap();
            let eps = dp_sgd_epsilon(sigma, 50, 1.0, 1e-5);
            assert!(eps <= target && eps > target * 0.999, "{target} -> {eps}");
        }
        assert!(calibrate_noise_multiplier(0.1, 50, 1e-5).is_none());
    }

    #[test]
    fn receipt_json_field_names() {
        let r = AccountingReceipt::gaussian(1.0, 1.0, 10, 1.0, 1e-5);
        let v = serde_json::to_value(&r).unwrap();
        for k in ["noise_multiplier", "C", "T", "q", "delta", "epsilon", "orders_used"] {
            assert!(v.get(k).is_some(), "{k}");
        }
    }
}
