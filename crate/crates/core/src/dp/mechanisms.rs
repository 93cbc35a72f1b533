//! Output-perturbation mechanisms.

use super::accountant::{rdp_compose_gaussian, to_epsilon};
use super::rng::NoiseRng;
use super::DpError;

/// Laplace noise scale `b = Δf / ε`.
pub fn laplace_scale(sensitivity: f64, epsilon: f64) -> Result<f64, DpError> {
    if !(sensitivity > 0.0) || !sensitivity.is_finite() {
        return Err(DpError::InvalidParameter(format!("sensitivity must be positive, got {sensitivity}")));
    }
    if !(epsilon > 0.0) {
        return Err(DpError::InvalidParameter(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(sensitivity / epsilon)
}

/// `true_value + Lap(0, sensitivity/ε)`, deterministic in `seed`.
pub fn laplace_mechanism(true_value: f64, sensitivity: f64, epsilon: f64, seed: u64) -> Result<f64, DpError> {
    let b = laplace_scale(sensitivity, epsilon)?;
    let mut rng = NoiseRng::new(seed);
    Ok(true_value + rng.laplace(b))
}

/// Scales `v` in place to ℓ2 norm at most `clip_norm`; returns the original norm.
pub fn clip_l2(v: &mut [f64], clip_norm: f64) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > clip_norm {
        let scale = clip_norm / norm;
        for x in v.iter_mut() {
            *x *= scale;
        }
    }
    norm
}

/// Clips `vector` to norm `clip_norm` and adds `N(0, (σ·C)² I)`.
pub fn gaussian_perturb_embedding(
    vector: &[f64],
    clip_norm: f64,
    noise_multiplier: f64,
    seed: u64,
) -> Result<Vec<f64>, DpError> {
    let mut rng = NoiseRng::new(seed);
    perturb_with(vector, clip_norm, noise_multiplier, &mut rng)
}

pub(crate) fn perturb_with(
    vector: &[f64],
    clip_norm: f64,
    noise_multiplier: f64,
    rng: &mut NoiseRng,
) -> Result<Vec<f64>, DpError> {
    if !(clip_norm > 0.0) || !clip_norm.is_finite() {
        return Err(DpError::InvalidParameter(format!("clip norm must be positive, got {clip_norm}")));
    }
    if !(noise_multiplier > 0.0) {
        return Err(DpError::InvalidParameter(format!(
            "noise multiplier must be positive, got {noise_multiplier}"
        )));
    }
    if vector.iter().any(|x| !x.is_finite()) {
        return Err(DpError::NonFiniteGradient);
    }
    let mut out = vector.to_vec();
    clip_l2(&mut out, clip_norm);
    let std = noise_multiplier * clip_norm;
    for x in out.iter_mut() {
        *x += rng.normal(std);
    }
    Ok(out)
}

/// Per-record ε of one Gaussian release at noise multiplier σ.
pub fn embedding_epsilon(noise_multiplier: f64, delta: f64) -> f64 {
    match rdp_compose_gaussian(noise_multiplier, 1, 1.0) {
        Ok(c) => to_epsilon(&c, delta),
        Err(_) => f64::INFINITY,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_sensitivity_unit_epsilon_scale() {
        assert_eq!(laplace_scale(1.0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn huge_epsilon_is_nearly_exact() {
        let v = laplace_mechanism(500.0, 1.0, 1e12, 9).unwrap();
        assert!((v - 500.0).abs() < 1e-6);
    }

    #[test]
    fn invalid_parameters() {
        assert!(laplace_mechanism(0.0, 0.0, 1.0, 1).is_err());
        assert!(laplace_mechanism(0.0, 1.0, 0.0, 1).is_err());
        assert!(gaussian_perturb_embedding(&[1.0], 0.0, 1.0, 1).is_err());
        assert!(gaussian_perturb_embedding(&[1.0], 1.0, 0.0, 1).is_err());
    }

    #[test]
    fn deterministic_in_seed() {
        let a = laplace_mechanism(3.0, 1.0, 0.5, 77).unwrap();
        let b = laplace_mechanism(3.0, 1.0, 0.5, 77).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn tiny_noise_is_identity_inside_ball() {
        let v = [0.3, -0.4];
        let out = gaussian_perturb_embedding(&v, 1.0, 1e-300, 5).unwrap();
        assert_eq!(out, v.to_vec());
    }

    #[test]
    fn clips_before_noise() {
        // norm 2·C_e, noise negligible
        let v = [1.2, 1.6];
        let out = gaussian_perturb_embedding(&v, 1.0, 1e-300, 5).unwrap();
        let n = (out[0] * out[0] + out[1] * out[1]).sqrt();
        assert!((n - 1.0).abs() < 1e-15);
    }
}
