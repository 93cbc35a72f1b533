//! Value → feature-vector encoders fitted on training columns.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::types::{DataType, Value};

pub const HASH_DIM: usize = 64;
const ONE_HOT_LIMIT: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Numeric { mean: f64, std: f64 },
    OneHot { vocabulary: Vec<String> },
    /// Rank in the sorted training vocabulary, scaled to [0, 1].
    Ordinal { vocabulary: Vec<String> },
    HashedText { dim: usize },
    /// Code points of the first `len` characters scaled to [0, 1]; keeps the
    /// lexicographic order of fixed-format strings such as dates.
    CharCodes { len: usize },
    /// `sign(x)·ln(1 + |x|)`; needs no statistics of the data.
    SignedLog,
    /// Several encodings of the same value, concatenated.
    Concat { parts: Vec<FeatureKind> },
}

impl FeatureKind {
    pub fn width(&self) -> usize {
        match self {
            FeatureKind::Numeric { .. } | FeatureKind::Ordinal { .. } | FeatureKind::SignedLog => 1,
            FeatureKind::CharCodes { len } => *len,
            FeatureKind::Concat { parts } => parts.iter().map(|p| p.width()).sum(),
            FeatureKind::OneHot { vocabulary } => vocabulary.len(),
            FeatureKind::HashedText { dim } => *dim,
        }
    }

    pub fn numeric(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        FeatureKind::Numeric { mean, std: if var > 0.0 { var.sqrt() } else { 1.0 } }
    }

    /// Picks an encoding from the column type and its training values.
    pub fn fit(data_type: DataType, values: &[&Value]) -> Self {
        match data_type {
            DataType::Int64 | DataType::Float64 => {
                FeatureKind::numeric(&values.iter().filter_map(|v| v.as_f64()).collect::<Vec<_>>())
            }
            DataType::Text => {
                let mut vocab: Vec<String> = values.iter().map(|v| v.to_string()).collect();
                vocab.sort();
                vocab.dedup();
                if vocab.len() <= ONE_HOT_LIMIT {
                    FeatureKind::OneHot { vocabulary: vocab }
                } else {
                    FeatureKind::HashedText { dim: HASH_DIM }
                }
            }
            DataType::Blob => FeatureKind::HashedText { dim: HASH_DIM },
        }
    }

    /// Data-independent encoding for a column type: fitting it reveals
    /// nothing about the training rows.
    pub fn public(data_type: DataType) -> FeatureKind {
        match data_type {
            DataType::Int64 | DataType::Float64 => FeatureKind::SignedLog,
            DataType::Text => FeatureKind::Concat {
                parts: vec![FeatureKind::CharCodes { len: 16 }, FeatureKind::HashedText { dim: HASH_DIM }],
            },
            DataType::Blob => FeatureKind::HashedText { dim: HASH_DIM },
        }
    }

    pub fn ordinal(values: &[&Value]) -> Self {
        let mut vocab: Vec<String> = values.iter().map(|v| v.to_string()).collect();
        vocab.sort();
        vocab.dedup();
        FeatureKind::Ordinal { vocabulary: vocab }
    }

    pub fn encode_into(&self, v: &Value, out: &mut Vec<f64>) {
        match self {
            FeatureKind::Numeric { mean, std } => out.push((v.as_f64().unwrap_or(*mean) - mean) / std),
            FeatureKind::OneHot { vocabulary } => {
                let s = v.to_string();
                out.extend(vocabulary.iter().map(|w| if *w == s { 1.0 } else { 0.0 }));
            }
            FeatureKind::Ordinal { vocabulary } => {
                let s = v.to_string();
                let rank = vocabulary.partition_point(|w| *w < s) as f64;
                out.push(if vocabulary.len() > 1 { rank / (vocabulary.len() - 1) as f64 } else { 0.0 });
            }
            FeatureKind::Concat { parts } => {
                for p in parts {
                    p.encode_into(v, out);
                }
            }
            FeatureKind::SignedLog => {
                let x = v.as_f64().unwrap_or(0.0);
                out.push(x.signum() * x.abs().ln_1p());
            }
            FeatureKind::CharCodes { len } => {
                let s = v.to_string();
                let mut chars = s.chars();
                for _ in 0..*len {
                    out.push(chars.next().map_or(0.0, |c| (c as u32).min(255) as f64 / 255.0));
                }
            }
            FeatureKind::HashedText { dim } => {
                let start = out.len();
                out.resize(start + dim, 0.0);
                let tokens: Vec<Vec<u8>> = match v {
                    Value::Blob(b) => b.chunks(4).map(|c| c.to_vec()).collect(),
                    other => other
                        .to_string()
                        .split(|c: char| !c.is_alphanumeric())
                        .filter(|t| !t.is_empty())
                        .map(|t| t.to_lowercase().into_bytes())
                        .collect(),
                };
                let n = tokens.len().max(1) as f64;
                for t in tokens {
                    let h = crate::types::fingerprint(&t);
                    let idx = (h % *dim as u64) as usize;
                    let sign = if (h >> 63) == 1 { -1.0 } else { 1.0 };
                    out[start + idx] += sign / n.sqrt();
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureEncoder {
    pub columns: Vec<FeatureKind>,
}

impl FeatureEncoder {
    /// Per input column, the concatenation of its public encodings.
    pub fn public(types: &[DataType]) -> Self {
        FeatureEncoder { columns: types.iter().map(|t| FeatureKind::public(*t)).collect() }
    }

    pub fn width(&self) -> usize {
        self.columns.iter().map(|c| c.width()).sum()
    }

    pub fn encode(&self, row: &[Value]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.width());
        for (k, v) in self.columns.iter().zip(row) {
            k.encode_into(v, &mut out);
        }
        out
    }
}

/// Maps output values to class indices.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub labels: Vec<Value>,
}

impl LabelSet {
    pub fn from_values<'a>(values: impl IntoIterator<Item = &'a Value>) -> Self {
        let mut m: BTreeMap<crate::types::ValueKey, Value> = BTreeMap::new();
        for v in values {
            m.entry(v.key()).or_insert_with(|| v.clone());
        }
        LabelSet { labels: m.into_values().collect() }
    }

    pub fn index(&self, v: &Value) -> Option<usize> {
        let k = v.key();
        self.labels.iter().position(|l| l.key() == k)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn widths_and_encoding() {
        let vals: Vec<Value> = ["b", "a", "b"].iter().map(|s| Value::text(*s)).collect();
        let refs: Vec<&Value> = vals.iter().collect();
        let k = FeatureKind::fit(DataType::Text, &refs);
        assert_eq!(k, FeatureKind::OneHot { vocabulary: vec!["a".into(), "b".into()] });
        let mut out = Vec::new();
        k.encode_into(&Value::text("b"), &mut out);
        assert_eq!(out, vec![0.0, 1.0]);
        let o = FeatureKind::ordinal(&refs);
        let mut out = Vec::new();
        o.encode_into(&Value::text("b"), &mut out);
        assert_eq!(out, vec![1.0]);
    }

    #[test]
    fn public_encodings_have_declared_width() {
        for (t, v) in [(DataType::Int64, Value::Int(-7)), (DataType::Text, Value::text("06/01/2015")), (DataType::Blob, Value::Blob(vec![1, 2, 3]))] {
            let enc = FeatureEncoder::public(&[t]);
            assert_eq!(enc.encode(&[v]).len(), enc.width());
        }
        let k = FeatureKind::CharCodes { len: 10 };
        let (mut a, mut b) = (Vec::new(), Vec::new());
        k.encode_into(&Value::text("06/01/2015"), &mut a);
        k.encode_into(&Value::text("06/05/2015"), &mut b);
        assert!(a < b);
    }

    #[test]
    fn hashed_text_is_deterministic() {
        let k = FeatureKind::HashedText { dim: 16 };
        let (mut a, mut b) = (Vec::new(), Vec::new());
        k.encode_into(&Value::text("a great movie"), &mut a);
        k.encode_into(&Value::text("A great  movie!"), &mut b);
        assert_eq!(a, b);
        assert_eq!(a.len(), 16);
    }
}
