//! Trained model artifacts and their on-disk format.
//!
//! A model file is one JSON header line followed by the weights as raw
//! little-endian `f64`. The header records `weights_offset` (bytes from the
//! start of the file) and `weights_count`; the header line is space-padded
//! so the weights start on an 8-byte boundary.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::features::FeatureEncoder;
use super::net::{argmax, Activation, LayerSpec, Mlp};
use super::LearnError;
use crate::dp::AccountingReceipt;
use crate::types::{DataType, Task, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSignature {
    pub input_types: Vec<DataType>,
    pub output_type: DataType,
    pub task: Task,
    /// Class values in output order; empty for regression and embeddings.
    #[serde(default)]
    pub output_labels: Vec<Value>,
}

impl ModelSignature {
    pub fn output_arity(&self) -> usize {
        match self.task {
            Task::Classification | Task::BlobRetrieval => self.output_labels.len(),
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub trained_with_dp: bool,
    /// Present iff `trained_with_dp`.
    pub epsilon_spent: Option<f64>,
    pub delta: Option<f64>,
    pub dataset_fingerprint: Option<u64>,
    pub frozen_prefix_layers: usize,
    /// Trained only on non-sensitive data (public encoders, public corpora).
    #[serde(default)]
    pub public_data: bool,
    /// How the architecture was obtained, e.g. `dnas`, `transfer:<id>`.
    pub source: String,
    #[serde(default)]
    pub receipt: Option<AccountingReceipt>,
    /// Privacy cost charged for the architecture search (always 0: the
    /// supernet weights are never released).
    #[serde(default)]
    pub search_epsilon: f64,
}

impl Provenance {
    pub fn public(source: impl Into<String>) -> Self {
        Provenance {
            trained_with_dp: false,
            epsilon_spent: None,
            delta: None,
            dataset_fingerprint: None,
            frozen_prefix_layers: 0,
            public_data: true,
            source: source.into(),
            receipt: None,
            search_epsilon: 0.0,
        }
    }

    pub fn dp(source: impl Into<String>, receipt: AccountingReceipt, fingerprint: u64, frozen: usize) -> Self {
        Provenance {
            trained_with_dp: true,
            epsilon_spent: Some(receipt.epsilon),
            delta: Some(receipt.delta),
            dataset_fingerprint: Some(fingerprint),
            frozen_prefix_layers: frozen,
            public_data: false,
            source: source.into(),
            receipt: Some(receipt),
            search_epsilon: 0.0,
        }
    }
}

/// Maps network outputs back to values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OutputDecoder {
    /// Argmax class index → output row.
    Classes { rows: Vec<Vec<Value>> },
    /// Standardized scalar target, clamped to `range` when set.
    Scalar {
        mean: f64,
        std: f64,
        integral: bool,
        #[serde(default)]
        range: Option<(f64, f64)>,
    },
    /// Raw output vector (embedding encoders).
    Vector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelArtifact {
    pub id: String,
    /// Model-call function this artifact implements, if any.
    #[serde(default)]
    pub function: Option<String>,
    pub signature: ModelSignature,
    pub input_dim: usize,
    pub architecture: Vec<LayerSpec>,
    pub encoder: FeatureEncoder,
    pub decoder: OutputDecoder,
    pub provenance: Provenance,
    /// Registry insertion order; larger is newer.
    #[serde(default)]
    pub created: u64,
    #[serde(skip)]
    pub weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    #[serde(flatten)]
    artifact: ModelArtifact,
    weights_offset: u64,
    weights_count: u64,
}

impl ModelArtifact {
    pub fn validate(&self) -> Result<(), LearnError> {
        let expected = super::net::param_count(self.input_dim, &self.architecture);
        if self.weights.len() != expected {
            return Err(LearnError::ShapeMismatch(format!("{} weights for an architecture of {expected}", self.weights.len())));
        }
        if self.provenance.trained_with_dp != self.provenance.epsilon_spent.is_some() {
            return Err(LearnError::Format("epsilon_spent must be present iff trained_with_dp".into()));
        }
        if self.encoder.width() != self.input_dim {
            return Err(LearnError::ShapeMismatch(format!("encoder width {} != input dim {}", self.encoder.width(), self.input_dim)));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.architecture.len()
    }

    pub fn mlp(&self) -> Mlp {
        Mlp { input_dim: self.input_dim, layers: self.architecture.clone(), params: self.weights.clone() }
    }

    pub fn encode(&self, inputs: &[Value]) -> Vec<f64> {
        self.encoder.encode(inputs)
    }

    /// Network output on the encoded inputs, softmax applied when the last
    /// layer is a softmax output.
    pub fn forward(&self, inputs: &[Value]) -> Result<Vec<f64>, LearnError> {
        let m = self.mlp();
        let out = m.forward(&self.encode(inputs))?;
        Ok(out)
    }

    /// Decoded output row for one input tuple.
    pub fn predict_row(&self, inputs: &[Value]) -> Result<Vec<Value>, LearnError> {
        let out = self.forward(inputs)?;
        match &self.decoder {
            OutputDecoder::Classes { rows } => {
                let c = argmax(&out);
                rows.get(c).cloned().ok_or_else(|| LearnError::ShapeMismatch(format!("class {c} has no decoded row")))
            }
            OutputDecoder::Scalar { mean, std, integral, range } => {
                let mut v = out.first().copied().unwrap_or(0.0) * std + mean;
                if let Some((lo, hi)) = range {
                    v = v.clamp(*lo, *hi);
                }
                Ok(vec![if *integral { Value::Int(v.round() as i64) } else { Value::Float(v) }])
            }
            OutputDecoder::Vector => Ok(out.into_iter().map(Value::Float).collect()),
        }
    }

    /// Fraction of `(inputs, expected row)` pairs predicted exactly.
    pub fn accuracy<'a>(&self, cases: impl IntoIterator<Item = (&'a [Value], &'a [Value])>) -> Result<f64, LearnError> {
        let (mut hit, mut n) = (0usize, 0usize);
        for (x, y) in cases {
            let p = self.predict_row(x)?;
            n += 1;
            if p.len() == y.len() && p.iter().zip(y).all(|(a, b)| a.key() == b.key()) {
                hit += 1;
            }
        }
        if n == 0 {
            return Err(LearnError::EmptyData);
        }
        Ok(hit as f64 / n as f64)
    }

    /// Seeded Gaussian random-projection encoder: a single identity layer.
    pub fn random_projection(id: impl Into<String>, encoder: FeatureEncoder, input_type: DataType, dim: usize, seed: u64) -> Self {
        let input_dim = encoder.width();
        let mut rng = crate::dp::NoiseRng::with_stream(seed, 0xE1BE);
        let scale = 1.0 / (dim as f64).sqrt();
        let mut weights: Vec<f64> = (0..dim * input_dim).map(|_| rng.normal(scale)).collect();
        weights.extend(std::iter::repeat(0.0).take(dim));
        ModelArtifact {
            id: id.into(),
            function: None,
            signature: ModelSignature { input_types: vec![input_type], output_type: DataType::Blob, task: Task::Embedding, output_labels: vec![] },
            input_dim,
            architecture: vec![LayerSpec { width: dim, activation: Activation::Identity }],
            encoder,
            decoder: OutputDecoder::Vector,
            provenance: Provenance::public("random-projection"),
            created: 0,
            weights,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, LearnError> {
        self.validate()?;
        let header_for = |offset: u64| -> Result<Vec<u8>, LearnError> {
            let h = Header { artifact: self.clone(), weights_offset: offset, weights_count: self.weights.len() as u64 };
            serde_json::to_vec(&h).map_err(|e| LearnError::Format(e.to_string()))
        };
        // The offset's digit count can change the header length; iterate to
        // a fixed point.
        let mut offset = 0u64;
        let mut header = header_for(offset)?;
        loop {
            let len = (header.len() as u64 + 1).div_ceil(8) * 8;
            if len == offset {
                break;
            }
            offset = len;
            header = header_for(offset)?;
        }
        let mut out = header;
        out.resize(offset as usize - 1, b' ');
        out.push(b'\n');
        for w in &self.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, LearnError> {
        let nl = bytes.iter().position(|b| *b == b'\n').ok_or_else(|| LearnError::Format("missing header line".into()))?;
        let h: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| LearnError::Format(e.to_string()))?;
        let start = h.weights_offset as usize;
        let end = start + 8 * h.weights_count as usize;
        if start < nl + 1 || end > bytes.len() {
            return Err(LearnError::Format(format!("weights span {start}..{end} outside file of {} bytes", bytes.len())));
        }
        let mut a = h.artifact;
        a.weights = bytes[start..end].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        a.validate()?;
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<(), LearnError> {
        crate::persist::write_atomic(path, &self.to_bytes()?).map_err(|e| LearnError::Io(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, LearnError> {
        let b = std::fs::read(path).map_err(|e| LearnError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&b)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::learn::features::FeatureKind;

    pub(crate) fn tiny() -> ModelArtifact {
        let encoder = FeatureEncoder { columns: vec![FeatureKind::Numeric { mean: 0.0, std: 1.0 }] };
        ModelArtifact {
            id: "m1".into(),
            function: Some("f".into()),
            signature: ModelSignature {
                input_types: vec![DataType::Float64],
                output_type: DataType::Text,
                task: Task::Classification,
                output_labels: vec![Value::text("neg"), Value::text("pos")],
            },
            input_dim: 1,
            architecture: vec![LayerSpec { width: 2, activation: Activation::SoftmaxOut }],
            encoder,
            decoder: OutputDecoder::Classes { rows: vec![vec![Value::text("neg")], vec![Value::text("pos")]] },
            provenance: Provenance::public("test"),
            created: 3,
            weights: vec![-1.0, 1.0, 0.0, 0.0],
        }
    }

    #[test]
    fn file_round_trip_is_exact() {
        let mut a = tiny();
        a.weights = vec![-0.1, 1.0 / 3.0, f64::MIN_POSITIVE, 5e300];
        let b = a.to_bytes().unwrap();
        let nl = b.iter().position(|c| *c == b'\n').unwrap();
        assert_eq!((nl + 1) % 8, 0);
        let h: serde_json::Value = serde_json::from_slice(&b[..nl]).unwrap();
        assert_eq!(h["weights_offset"].as_u64().unwrap() as usize, nl + 1);
        assert_eq!(h["weights_count"], 4);
        assert_eq!(b.len(), nl + 1 + 32);
        assert_eq!(ModelArtifact::from_bytes(&b).unwrap(), a);
    }

    #[test]
    fn predicts_decoded_rows() {
        let a = tiny();
        assert_eq!(a.predict_row(&[Value::Float(2.0)]).unwrap(), vec![Value::text("pos")]);
        assert_eq!(a.predict_row(&[Value::Float(-2.0)]).unwrap(), vec![Value::text("neg")]);
    }

    #[test]
    fn provenance_invariant_checked() {
        let mut a = tiny();
        a.provenance.epsilon_spent = Some(1.0);
        assert!(a.validate().is_err());
        a.weights.pop();
        assert!(a.to_bytes().is_err());
    }
}
