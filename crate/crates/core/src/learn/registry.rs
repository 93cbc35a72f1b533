//! Store of trained artifacts and the reuse/transfer matcher.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::artifact::{ModelArtifact, ModelSignature};
use super::LearnError;
use crate::types::Task;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelRegistry {
    pub artifacts: Vec<ModelArtifact>,
    pub next_seq: u64,
}

/// Outcome of looking up a reusable model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RegistryMatch {
    /// Use the artifact as is.
    Exact { artifact_id: String },
    /// Freeze the first `frozen_prefix_layers` layers and train a new head.
    Adapt { artifact_id: String, frozen_prefix_layers: usize },
    None,
}

impl ModelRegistry {
    /// Stores the artifact, assigning its `created` sequence. An artifact
    /// with the same id is replaced.
    pub fn register(&mut self, mut artifact: ModelArtifact) -> Result<String, LearnError> {
        artifact.validate()?;
        self.next_seq += 1;
        artifact.created = self.next_seq;
        self.artifacts.retain(|a| a.id != artifact.id);
        let id = artifact.id.clone();
        self.artifacts.push(artifact);
        Ok(id)
    }

    pub fn get(&self, id: &str) -> Option<&ModelArtifact> {
        self.artifacts.iter().find(|a| a.id == id)
    }

    pub fn fresh_id(&self, prefix: &str) -> String {
        let mut n = self.next_seq + 1;
        loop {
            let id = format!("{prefix}-{n}");
            if self.get(&id).is_none() {
                return id;
            }
            n += 1;
        }
    }

    /// Public encoders usable for noisy-embedding inference on inputs of
    /// the given type, newest first.
    pub fn encoders(&self, input: &ModelSignature) -> Vec<&ModelArtifact> {
        let mut v: Vec<&ModelArtifact> = self
            .artifacts
            .iter()
            .filter(|a| a.signature.task == Task::Embedding && a.provenance.public_data && a.signature.input_types == input.input_types)
            .collect();
        v.sort_by(|a, b| b.created.cmp(&a.created));
        v
    }

    /// One `<id>.model` file per artifact plus `index.json`.
    pub fn save_dir(&self, dir: &Path) -> Result<(), LearnError> {
        let io = |e: std::io::Error| LearnError::Io(e.to_string());
        std::fs::create_dir_all(dir).map_err(io)?;
        for a in &self.artifacts {
            a.save(&dir.join(format!("{}.model", a.id)))?;
        }
        let index = Index { next_seq: self.next_seq, ids: self.artifacts.iter().map(|a| a.id.clone()).collect() };
        crate::persist::write_json_atomic(&dir.join("index.json"), &index).map_err(io)
    }

    pub fn load_dir(dir: &Path) -> Result<Self, LearnError> {
        let index: Option<Index> = crate::persist::read_json(&dir.join("index.json")).map_err(|e| LearnError::Io(e.to_string()))?;
        let Some(index) = index else { return Ok(ModelRegistry::default()) };
        let artifacts =
            index.ids.iter().map(|id| ModelArtifact::load(&dir.join(format!("{id}.model")))).collect::<Result<Vec<_>, _>>()?;
        Ok(ModelRegistry { artifacts, next_seq: index.next_seq })
    }
}

#[derive(Serialize, Deserialize)]
struct Index {
    next_seq: u64,
    ids: Vec<String>,
}

fn eligible(a: &ModelArtifact) -> bool {
    a.signature.task != Task::Embedding && (a.provenance.trained_with_dp || a.provenance.public_data)
}

/// Exact signature match (labels included, and the dataset fingerprint when
/// one is given) beats a same-task, same-input-type adaptation; newest wins
/// within a tier. An exact match trained on different data is demoted to an
/// adaptation so the head is retrained on the current data.
pub fn registry_match(signature: &ModelSignature, fingerprint: Option<u64>, registry: &ModelRegistry) -> RegistryMatch {
    let mut best_exact: Option<&ModelArtifact> = None;
    let mut best_adapt: Option<&ModelArtifact> = None;
    let newer = |cur: Option<&ModelArtifact>, a: &ModelArtifact| cur.is_none_or(|c| a.created > c.created);
    for a in registry.artifacts.iter().filter(|a| eligible(a)) {
        let s = &a.signature;
        if s.task != signature.task || s.input_types != signature.input_types || s.output_type != signature.output_type {
            continue;
        }
        let same_data = match (fingerprint, a.provenance.dataset_fingerprint) {
            (Some(f), Some(g)) => f == g,
            _ => true,
        };
        if s == signature && same_data {
            if newer(best_exact, a) {
                best_exact = Some(a);
            }
        } else if a.depth() >= 2 && newer(best_adapt, a) {
            best_adapt = Some(a);
        }
    }
    if let Some(a) = best_exact {
        return RegistryMatch::Exact { artifact_id: a.id.clone() };
    }
    match best_adapt {
        Some(a) => RegistryMatch::Adapt { artifact_id: a.id.clone(), frozen_prefix_layers: a.depth() - 1 },
        None => RegistryMatch::None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learn::artifact::tests::tiny;
    use crate::learn::net::{Activation, LayerSpec};
    use crate::types::Value;

    fn two_layer(id: &str, labels: &[&str]) -> ModelArtifact {
        let mut a = tiny();
        a.id = id.into();
        a.signature.output_labels = labels.iter().map(|l| Value::text(*l)).collect();
        a.architecture = vec![LayerSpec { width: 3, activation: Activation::Relu }, LayerSpec { width: labels.len(), activation: Activation::SoftmaxOut }];
        a.weights = vec![0.5; crate::learn::net::param_count(1, &a.architecture)];
        a
    }

    #[test]
    fn empty_registry_has_no_match() {
        assert_eq!(registry_match(&tiny().signature, None, &ModelRegistry::default()), RegistryMatch::None);
    }

    #[test]
    fn exact_then_adapt_then_none() {
        let mut r = ModelRegistry::default();
        r.register(two_layer("a", &["neg", "pos"])).unwrap();
        r.register(two_layer("b", &["neg", "neu", "pos"])).unwrap();
        let sig = two_layer("x", &["neg", "pos"]).signature;
        assert_eq!(registry_match(&sig, None, &r), RegistryMatch::Exact { artifact_id: "a".into() });
        let sig4 = two_layer("x", &["a", "b", "c", "d"]).signature;
        assert_eq!(registry_match(&sig4, None, &r), RegistryMatch::Adapt { artifact_id: "b".into(), frozen_prefix_layers: 1 });
        let mut other = sig.clone();
        other.task = Task::Regression;
        assert_eq!(registry_match(&other, None, &r), RegistryMatch::None);
    }

    #[test]
    fn newest_wins_and_drift_demotes() {
        let mut r = ModelRegistry::default();
        let mut a = two_layer("old", &["neg", "pos"]);
        a.provenance.dataset_fingerprint = Some(1);
        r.register(a.clone()).unwrap();
        a.id = "new".into();
        r.register(a).unwrap();
        let sig = two_layer("x", &["neg", "pos"]).signature;
        assert_eq!(registry_match(&sig, Some(1), &r), RegistryMatch::Exact { artifact_id: "new".into() });
        assert_eq!(registry_match(&sig, Some(2), &r), RegistryMatch::Adapt { artifact_id: "new".into(), frozen_prefix_layers: 1 });
    }

    #[test]
    fn directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut r = ModelRegistry::default();
        r.register(two_layer("a", &["neg", "pos"])).unwrap();
        r.save_dir(dir.path()).unwrap();
        assert_eq!(ModelRegistry::load_dir(dir.path()).unwrap(), r);
    }
}
