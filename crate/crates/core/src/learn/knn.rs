//! Noisy-embedding store and exact k-nearest-neighbor classification.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::artifact::ModelArtifact;
use super::LearnError;
use crate::dp::{embedding_epsilon, mechanisms::perturb_with, NoiseRng};
use crate::types::{Value, ValueKey};

pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NoisyStore {
    pub points: Vec<Vec<f64>>,
    pub labels: Vec<Value>,
    pub clip_norm: f64,
    pub noise_multiplier: f64,
    /// Per-record ε of the single Gaussian release.
    pub epsilon: f64,
}

impl NoisyStore {
    /// Embeds each input tuple with the public `encoder`, clips to
    /// `clip_norm`, and adds `N(0, (σ·C)²)` per coordinate.
    pub fn build(
        encoder: &ModelArtifact,
        records: &[(Vec<Value>, Value)],
        clip_norm: f64,
        noise_multiplier: f64,
        delta: f64,
        seed: u64,
    ) -> Result<Self, LearnError> {
        let mut rng = NoiseRng::new(seed);
        let mut points = Vec::with_capacity(records.len());
        for (x, _) in records {
            let e = encoder.forward(x)?;
            points.push(perturb_with(&e, clip_norm, noise_multiplier, &mut rng)?);
        }
        Ok(NoisyStore {
            points,
            labels: records.iter().map(|(_, y)| y.clone()).collect(),
            clip_norm,
            noise_multiplier,
            epsilon: embedding_epsilon(noise_multiplier, delta),
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Majority vote over the `k` nearest stored points (exact ℓ2 scan). Vote
/// ties go to the label with the smallest summed distance.
pub fn knn_predict(query: &[f64], store: &NoisyStore, k: usize) -> Result<Value, LearnError> {
    if store.is_empty() {
        return Err(LearnError::EmptyStore);
    }
    if k == 0 {
        return Err(LearnError::ShapeMismatch("k must be at least 1".into()));
    }
    let mut d: Vec<(f64, usize)> = store
        .points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if p.len() != query.len() {
                return Err(LearnError::ShapeMismatch(format!("query width {} != stored width {}", query.len(), p.len())));
            }
            Ok((p.iter().zip(query).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt(), i))
        })
        .collect::<Result<_, _>>()?;
    d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut votes: BTreeMap<ValueKey, (usize, f64, usize)> = BTreeMap::new();
    for &(dist, i) in d.iter().take(k) {
        let e = votes.entry(store.labels[i].key()).or_insert((0, 0.0, i));
        e.0 += 1;
        e.1 += dist;
    }
    let (_, _, idx) = votes
        .into_values()
        .min_by(|a, b| b.0.cmp(&a.0).then(a.1.total_cmp(&b.1)))
        .expect("k ≥ 1 and store nonempty");
    Ok(store.labels[idx].clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(points: Vec<Vec<f64>>, labels: Vec<&str>) -> NoisyStore {
        NoisyStore { points, labels: labels.into_iter().map(Value::text).collect(), ..Default::default() }
    }

    #[test]
    fn single_point_store() {
        let s = store(vec![vec![5.0, 5.0]], vec!["only"]);
        assert_eq!(knn_predict(&[0.0, 0.0], &s, 5).unwrap(), Value::text("only"));
    }

    #[test]
    fn exact_hit_with_k1() {
        let s = store(vec![vec![0.0], vec![1.0], vec![2.0]], vec!["a", "b", "c"]);
        assert_eq!(knn_predict(&[1.0], &s, 1).unwrap(), Value::text("b"));
    }

    #[test]
    fn vote_tie_goes_to_closer_label() {
        let s = store(vec![vec![0.0], vec![3.0], vec![-1.0], vec![4.0]], vec!["a", "a", "b", "b"]);
        // k=4: two votes each; summed distances a: 0+3, b: 1+4
        assert_eq!(knn_predict(&[0.0], &s, 4).unwrap(), Value::text("a"));
    }

    #[test]
    fn empty_store_errors() {
        assert_eq!(knn_predict(&[0.0], &NoisyStore::default(), 5), Err(LearnError::EmptyStore));
    }
}
