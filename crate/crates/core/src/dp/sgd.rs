//! DP-SGD: per-example ℓ2 clipping over all trainable parameters jointly,
//! Gaussian noise on the clipped sum, averaged update.

use serde::{Deserialize, Serialize};

use super::accountant::{dp_sgd_epsilon, rdp_compose_gaussian, AccountingReceipt, RdpCurve};
use super::rng::NoiseRng;
use super::DpError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpSgdConfig {
    /// Clipping norm C.
    pub clip_norm: f64,
    /// Gaussian std on the clipped gradient sum is `noise_multiplier · C`.
    pub noise_multiplier: f64,
    /// Sampling rate q; the batch size is `max(1, round(q·n))`.
    pub sampling_rate: f64,
    pub steps: u64,
    pub learning_rate: f64,
    pub delta: f64,
    pub seed: u64,
}

impl Default for DpSgdConfig {
    fn default() -> Self {
        DpSgdConfig {
            clip_norm: 1.0,
            noise_multiplier: 1.0,
            sampling_rate: 1.0,
            steps: 100,
            learning_rate: 0.5,
            delta: 1e-5,
            seed: 0,
        }
    }
}

impl DpSgdConfig {
    pub fn validate(&self) -> Result<(), DpError> {
        let bad = |msg: String| Err(DpError::InvalidParameter(msg));
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip norm must be positive, got {}", self.clip_norm));
        }
        if !(self.noise_multiplier >= 0.0) || !self.noise_multiplier.is_finite() {
            return bad(format!("noise multiplier must be nonnegative, got {}", self.noise_multiplier));
        }
        if !(self.sampling_rate > 0.0 && self.sampling_rate <= 1.0) {
            return bad(format!("sampling rate {} outside (0, 1]", self.sampling_rate));
        }
        if !(self.learning_rate > 0.0) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta {} outside (0, 1)", self.delta));
        }
        Ok(())
    }

    /// Total ε after all `steps`; infinite with zero noise.
    pub fn epsilon(&self) -> f64 {
        dp_sgd_epsilon(self.noise_multiplier, self.steps, self.sampling_rate, self.delta)
    }

    pub fn receipt(&self) -> AccountingReceipt {
        AccountingReceipt::gaussian(self.noise_multiplier, self.clip_norm, self.steps, self.sampling_rate, self.delta)
    }

    pub fn batch_size(&self, n: usize) -> usize {
        ((self.sampling_rate * n as f64).round() as usize).clamp(1, n.max(1))
    }
}

/// Running sum of clipped per-example gradients.
#[derive(Debug, Clone)]
pub struct ClippedSum {
    pub sum: Vec<f64>,
    pub count: usize,
    pub clipped: usize,
    clip_norm: f64,
}

impl ClippedSum {
    pub fn new(dim: usize, clip_norm: f64) -> Self {
        ClippedSum { sum: vec![0.0; dim], count: 0, clipped: 0, clip_norm }
    }

    /// Clips `grad` in place (factor `min(1, C/‖g‖)`) and adds it to the sum.
    pub fn add(&mut self, grad: &mut [f64]) -> Result<(), DpError> {
        if grad.len() != self.sum.len() {
            return Err(DpError::InvalidParameter(format!(
                "gradient length {} != parameter count {}",
                grad.len(),
                self.sum.len()
            )));
        }
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(DpError::NonFiniteGradient);
        }
        let norm = super::mechanisms::clip_l2(grad, self.clip_norm);
        if norm > self.clip_norm {
            self.clipped += 1;
        }
        for (s, g) in self.sum.iter_mut().zip(grad.iter()) {
            *s += g;
        }
        self.count += 1;
        Ok(())
    }

    /// Adds noise to the sum and applies the averaged update to `params`.
    /// Coordinates with `trainable[i] == false` are left untouched.
    pub fn apply(
        mut self,
        params: &mut [f64],
        trainable: Option<&[bool]>,
        config: &DpSgdConfig,
        rng: &mut NoiseRng,
    ) -> Result<StepReport, DpError> {
        if self.count == 0 {
            return Err(DpError::InvalidParameter("empty batch".into()));
        }
        let is_trainable = |i: usize| trainable.map_or(true, |t| t[i]);
        if config.noise_multiplier > 0.0 {
            let std = config.noise_multiplier * config.clip_norm;
            for (i, s) in self.sum.iter_mut().enumerate() {
                if is_trainable(i) {
                    *s += rng.normal(std);
                }
            }
        }
        let b = self.count as f64;
        for (i, (p, s)) in params.iter_mut().zip(self.sum.iter()).enumerate() {
            if is_trainable(i) {
                *p -= config.learning_rate * (s / b);
            }
        }
        let increment = if config.noise_multiplier > 0.0 {
            Some(rdp_compose_gaussian(config.noise_multiplier, 1, config.sampling_rate)?)
        } else {
            None
        };
        Ok(StepReport { batch_size: self.count, clipped: self.clipped, increment })
    }
}

/// Outcome of one DP-SGD step. `increment` is `None` when no noise was added
/// (the step is not differentially private).
#[derive(Debug, Clone)]
pub struct StepReport {
    pub batch_size: usize,
    pub clipped: usize,
    pub increment: Option<RdpCurve>,
}

/// One DP-SGD step over a batch of per-example gradients.
pub fn dp_sgd_step(
    params: &mut [f64],
    per_example_grads: &[Vec<f64>],
    config: &DpSgdConfig,
    rng: &mut NoiseRng,
) -> Result<StepReport, DpError> {
    if per_example_grads.is_empty() {
        return Err(DpError::InvalidParameter("empty batch".into()));
    }
    let mut acc = ClippedSum::new(params.len(), config.clip_norm);
    for g in per_example_grads {
        let mut g = g.clone();
        acc.add(&mut g)?;
    }
    acc.apply(params, None, config, rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(noise: f64, clip: f64) -> DpSgdConfig {
        DpSgdConfig { clip_norm: clip, noise_multiplier: noise, learning_rate: 0.1, ..Default::default() }
    }

    #[test]
    fn clips_large_gradient_to_norm_one() {
        let mut acc = ClippedSum::new(2, 1.0);
        let mut g = vec![6.0, 8.0];
        acc.add(&mut g).unwrap();
        let n = (acc.sum[0].powi(2) + acc.sum[1].powi(2)).sqrt();
        assert!((n - 1.0).abs() < 1e-15);
        assert_eq!(acc.clipped, 1);
    }

    #[test]
    fn opposing_gradients_cancel() {
        let mut p = vec![1.0, 2.0];
        let grads = vec![vec![0.3, -0.2], vec![-0.3, 0.2]];
        dp_sgd_step(&mut p, &grads, &cfg(0.0, 1.0), &mut NoiseRng::new(0)).unwrap();
        assert_eq!(p, vec![1.0, 2.0]);
    }

    #[test]
    fn noiseless_unclipped_equals_plain_sgd() {
        let grads = vec![vec![0.5, -1.5, 2.0], vec![3.0, 0.25, -0.75], vec![-1.0, 1.0, 0.1]];
        let c = cfg(0.0, 1e12);
        let mut p = vec![0.1, 0.2, 0.3];
        dp_sgd_step(&mut p, &grads, &c, &mut NoiseRng::new(1)).unwrap();

        let mut q = vec![0.1, 0.2, 0.3];
        let mut sum = vec![0.0; 3];
        for g in &grads {
            for i in 0..3 {
                sum[i] += g[i];
            }
        }
        for i in 0..3 {
            q[i] -= c.learning_rate * (sum[i] / 3.0);
        }
        assert_eq!(p.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), q.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn non_finite_gradient_is_rejected() {
        let mut p = vec![0.0];
        let r = dp_sgd_step(&mut p, &[vec![f64::NAN]], &cfg(1.0, 1.0), &mut NoiseRng::new(0));
        assert!(matches!(r, Err(DpError::NonFiniteGradient)));
    }

    #[test]
    fn noisy_step_reports_increment() {
        let mut p = vec![0.0];
        let r = dp_sgd_step(&mut p, &[vec![0.5]], &cfg(1.0, 1.0), &mut NoiseRng::new(0)).unwrap();
        assert_eq!(r.increment.unwrap().values[2], 1.0);
    }

    #[test]
    fn frozen_coordinates_untouched() {
        let c = cfg(3.0, 1.0);
        let mut acc = ClippedSum::new(2, 1.0);
        acc.add(&mut [0.5, 0.5]).unwrap();
        let mut p = vec![1.0, 1.0];
        acc.apply(&mut p, Some(&[false, true]), &c, &mut NoiseRng::new(4)).unwrap();
        assert_eq!(p[0], 1.0);
        assert_ne!(p[1], 1.0);
    }
}
