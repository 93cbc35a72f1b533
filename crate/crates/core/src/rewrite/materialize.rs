//! Turns a [`TrainingRequest`] into a registered artifact.
//!
//! Requests carry a content-derived artifact id, so a request that was
//! already materialized returns the stored artifact without touching data.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{loss_for, RewriteError, SubqueryTarget, TrainingMethod, TrainingRequest, TrainingSource};
use crate::dp::NoiseRng;
use crate::exec::{evaluate, ExecContext, FunctionModels, Table, TableSet};
use crate::frontend::AggFunc;
use crate::learn::dnas::HEAD_TAG;
use crate::learn::net::param_count;
use crate::learn::train::{init_layer, train_dpsgd, TrainReport};
use crate::learn::{
    dnas_search, Activation, Architecture, Dataset, FeatureEncoder, LabelSet, LayerSpec, Mlp, ModelArtifact, ModelRegistry,
    OutputDecoder, Provenance, SearchSpace, Target,
};
use crate::types::{fingerprint, DataType, Task, Value, ValueKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaterializeOutcome {
    pub artifact_id: String,
    /// True when the artifact already existed and nothing was trained.
    pub cached: bool,
    pub report: Option<TrainReport>,
    pub architecture: Option<Architecture>,
    pub training_rows: usize,
    /// Accuracy (or 1 − relative error for regression) on the training set.
    pub training_accuracy: Option<f64>,
}

fn terr(e: impl std::fmt::Display) -> RewriteError {
    RewriteError::Training(e.to_string())
}

/// Examples plus the decoder that reads the network output back.
struct Prepared {
    data: Dataset,
    encoder: FeatureEncoder,
    decoder: OutputDecoder,
    fingerprint: u64,
    /// Decoded expectations for the training-accuracy check.
    cases: Vec<(Vec<Value>, Vec<Value>)>,
}

pub fn materialize(
    req: &TrainingRequest,
    tables: &TableSet,
    functions: &FunctionModels,
    registry: &mut ModelRegistry,
) -> Result<MaterializeOutcome, RewriteError> {
    if registry.get(&req.artifact_id).is_some() {
        return Ok(MaterializeOutcome {
            artifact_id: req.artifact_id.clone(),
            cached: true,
            report: None,
            architecture: None,
            training_rows: 0,
            training_accuracy: None,
        });
    }
    let encoder = match &req.method {
        TrainingMethod::Transfer { base, .. } => {
            registry.get(base).ok_or_else(|| terr(format!("transfer base '{base}' not in registry")))?.encoder.clone()
        }
        _ => FeatureEncoder::public(&req.signature.input_types),
    };
    let prep = match &req.source {
        TrainingSource::Labelled { relation, inputs, label } => labelled(req, tables, relation, inputs, label, encoder)?,
        TrainingSource::Subquery { chain, slots, target, workload, .. } => {
            let ctx = ExecContext { tables, functions, registry };
            let (full, _) = evaluate(chain, ctx, 0).map_err(terr)?;
            let idx: Vec<usize> = slots
                .iter()
                .map(|s| full.column_index(&s.column).ok_or_else(|| terr(format!("slot column {} missing", s.column))))
                .collect::<Result<_, _>>()?;
            match target {
                SubqueryTarget::Rows { attributes } => subquery_rows(&full, &idx, attributes, encoder)?,
                SubqueryTarget::Aggregate { spec, scale } => {
                    let ops: Vec<_> = slots.iter().map(|s| s.op).collect();
                    let input = spec.input.as_deref().map(|c| full.column_index(c).ok_or_else(|| terr(format!("column {c} missing")))).transpose()?;
                    let seed = req.dpsgd.seed ^ 0x5A5A;
                    subquery_aggregate(&full, &idx, &ops, spec.func, input, *scale, spec.output_type, *workload, seed, encoder)?
                }
            }
        }
    };
    if prep.data.is_empty() {
        return Err(RewriteError::Training("no training examples".into()));
    }
    let loss = loss_for(req.signature.task);
    let (out_dim, out_act) = match &prep.decoder {
        OutputDecoder::Classes { rows } => (rows.len(), Activation::SoftmaxOut),
        _ => (1, Activation::Identity),
    };
    let input_dim = prep.encoder.width();
    let (model, report, arch, source, frozen) = match &req.method {
        TrainingMethod::Search { blocks, options } => {
            let space = SearchSpace { input_dim, output_dim: out_dim, output_activation: out_act, blocks: blocks.clone(), temperature: 1.0 };
            let (train, val) = split(&prep.data);
            let found = dnas_search(&space, &train, &val, options).map_err(terr)?;
            let mut m = space.initial_model(&found.architecture, req.dpsgd.seed).map_err(terr)?;
            let r = train_dpsgd(&mut m, &prep.data, loss, &req.dpsgd, None).map_err(terr)?;
            (m, r, Some(found.architecture), "dnas".to_string(), 0)
        }
        TrainingMethod::Fixed { hidden } => {
            let space = SearchSpace {
                input_dim,
                output_dim: out_dim,
                output_activation: out_act,
                blocks: hidden.iter().map(|w| vec![*w]).collect(),
                temperature: 1.0,
            };
            let mut m = space.initial_model(hidden, req.dpsgd.seed).map_err(terr)?;
            let r = train_dpsgd(&mut m, &prep.data, loss, &req.dpsgd, None).map_err(terr)?;
            (m, r, Some(hidden.clone()), "fixed".to_string(), 0)
        }
        TrainingMethod::Transfer { base, frozen_prefix_layers } => {
            let b = registry.get(base).expect("checked above");
            let trunk = &b.architecture[..*frozen_prefix_layers];
            let trunk_params = param_count(b.input_dim, trunk);
            let d = trunk.last().map_or(b.input_dim, |l| l.width);
            let mut layers = trunk.to_vec();
            layers.push(LayerSpec { width: out_dim, activation: out_act });
            let mut params = b.weights[..trunk_params].to_vec();
            params.extend(init_layer(req.dpsgd.seed, HEAD_TAG, out_dim, d, d));
            let mut m = Mlp { input_dim: b.input_dim, layers, params };
            let mask: Vec<bool> = (0..m.params.len()).map(|i| i >= trunk_params).collect();
            let r = train_dpsgd(&mut m, &prep.data, loss, &req.dpsgd, Some(&mask)).map_err(terr)?;
            (m, r, None, format!("transfer:{base}"), *frozen_prefix_layers)
        }
    };
    let provenance = if report.epsilon.is_finite() {
        Provenance::dp(source, report.receipt.clone(), prep.fingerprint, frozen)
    } else {
        // no noise: a plain model that must never be offered for reuse
        Provenance {
            trained_with_dp: false,
            epsilon_spent: None,
            delta: None,
            dataset_fingerprint: Some(prep.fingerprint),
            frozen_prefix_layers: frozen,
            public_data: false,
            source,
            receipt: None,
            search_epsilon: 0.0,
        }
    };
    let artifact = ModelArtifact {
        id: req.artifact_id.clone(),
        function: Some(req.function.clone()),
        signature: req.signature.clone(),
        input_dim: model.input_dim,
        architecture: model.layers.clone(),
        encoder: prep.encoder.clone(),
        decoder: prep.decoder.clone(),
        provenance,
        created: 0,
        weights: model.params,
    };
    let accuracy = training_accuracy(&artifact, &prep.cases);
    let id = registry.register(artifact).map_err(terr)?;
    Ok(MaterializeOutcome {
        artifact_id: id,
        cached: false,
        report: Some(report),
        architecture: arch,
        training_rows: prep.data.len(),
        training_accuracy: accuracy,
    })
}

fn training_accuracy(a: &ModelArtifact, cases: &[(Vec<Value>, Vec<Value>)]) -> Option<f64> {
    if cases.is_empty() {
        return None;
    }
    match a.decoder {
        OutputDecoder::Classes { .. } => a.accuracy(cases.iter().map(|(x, y)| (x.as_slice(), y.as_slice()))).ok(),
        _ => {
            let mut err = 0.0;
            let mut norm = 0.0;
            for (x, y) in cases {
                let p = a.predict_row(x).ok()?;
                let (p, y) = (p[0].as_f64()?, y[0].as_f64()?);
                err += (p - y).abs();
                norm += y.abs();
            }
            Some((1.0 - err / norm.max(1e-12)).max(0.0))
        }
    }
}

/// Deterministic alternating split; tiny sets use the same data for both.
fn split(d: &Dataset) -> (Dataset, Dataset) {
    if d.len() < 4 {
        return (d.clone(), d.clone());
    }
    let (a, b): (Vec<usize>, Vec<usize>) = (0..d.len()).partition(|i| i % 5 != 4);
    (d.subset(&a), d.subset(&b))
}

fn labelled(
    req: &TrainingRequest,
    tables: &TableSet,
    relation: &str,
    inputs: &[String],
    label: &str,
    encoder: FeatureEncoder,
) -> Result<Prepared, RewriteError> {
    let t = tables.read(relation).ok_or_else(|| terr(format!("no data for relation '{relation}'")))?;
    let idx: Vec<usize> =
        inputs.iter().map(|a| t.column_index(a).ok_or_else(|| terr(format!("{relation}.{a} missing")))).collect::<Result<_, _>>()?;
    let li = t.column_index(label).ok_or_else(|| terr(format!("{relation}.{label} missing")))?;
    let mut data = Dataset::default();
    let mut cases = Vec::new();
    let decoder = match req.signature.task {
        Task::Regression => OutputDecoder::Scalar { mean: 0.0, std: 1.0, integral: req.signature.output_type == DataType::Int64, range: None },
        _ => {
            let labels = if req.signature.output_labels.is_empty() {
                LabelSet::from_values(t.rows.iter().map(|r| &r[li]))
            } else {
                LabelSet { labels: req.signature.output_labels.clone() }
            };
            OutputDecoder::Classes { rows: labels.labels.iter().map(|l| vec![l.clone()]).collect() }
        }
    };
    for r in &t.rows {
        let x: Vec<Value> = idx.iter().map(|&i| r[i].clone()).collect();
        let y = &r[li];
        let target = match &decoder {
            OutputDecoder::Classes { rows } => match rows.iter().position(|c| c[0].key() == y.key()) {
                Some(c) => Target::Class(c),
                None => continue,
            },
            _ => match y.as_f64() {
                Some(v) => Target::Values(vec![v]),
                None => continue,
            },
        };
        data.push(encoder.encode(&x), target);
        cases.push((x, vec![y.clone()]));
    }
    Ok(Prepared { data, encoder, decoder, fingerprint: fingerprint(&t.csv_bytes()), cases })
}

fn key_of(row: &[Value], idx: &[usize]) -> Vec<ValueKey> {
    idx.iter().map(|&i| row[i].key()).collect()
}

/// One example per row of the unfiltered subquery: the row's literal tuple
/// maps to the first (canonical order) projected row sharing that tuple.
fn subquery_rows(full: &Table, slot_idx: &[usize], attributes: &[String], encoder: FeatureEncoder) -> Result<Prepared, RewriteError> {
    let proj: Vec<usize> =
        attributes.iter().map(|a| full.column_index(a).ok_or_else(|| terr(format!("column {a} missing")))).collect::<Result<_, _>>()?;
    let mut rows = full.rows.clone();
    rows.sort_by(|a, b| a.iter().zip(b).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal));
    let mut answer: BTreeMap<Vec<ValueKey>, Vec<Value>> = BTreeMap::new();
    for r in &rows {
        answer.entry(key_of(r, slot_idx)).or_insert_with(|| proj.iter().map(|&i| r[i].clone()).collect());
    }
    let mut classes: BTreeMap<Vec<ValueKey>, Vec<Value>> = BTreeMap::new();
    for a in answer.values() {
        classes.entry(a.iter().map(Value::key).collect()).or_insert_with(|| a.clone());
    }
    let class_keys: Vec<&Vec<ValueKey>> = classes.keys().collect();
    let mut data = Dataset::default();
    let mut cases = Vec::new();
    for r in &rows {
        let x: Vec<Value> = slot_idx.iter().map(|&i| r[i].clone()).collect();
        let a = &answer[&key_of(r, slot_idx)];
        let ak: Vec<ValueKey> = a.iter().map(Value::key).collect();
        let c = class_keys.binary_search(&&ak).expect("class present");
        data.push(encoder.encode(&x), Target::Class(c));
        cases.push((x, a.clone()));
    }
    Ok(Prepared {
        data,
        encoder,
        decoder: OutputDecoder::Classes { rows: classes.into_values().collect() },
        fingerprint: fingerprint(&full.csv_bytes()),
        cases,
    })
}

/// Value of the aggregate over the rows of `full` matching every literal.
pub(crate) fn aggregate_at(
    full: &Table,
    slot_idx: &[usize],
    ops: &[crate::types::CmpOp],
    literals: &[Value],
    func: AggFunc,
    input: Option<usize>,
) -> f64 {
    let hit = full.rows.iter().filter(|r| slot_idx.iter().zip(ops).zip(literals).all(|((&i, op), v)| op.eval(&r[i], v) == Some(true)));
    let mut vals: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for r in hit {
        n += 1;
        if let Some(i) = input {
            if let Some(v) = r[i].as_f64() {
                vals.push(v);
            }
        }
    }
    vals.sort_by(f64::total_cmp);
    let sum: f64 = vals.iter().sum();
    match func {
        AggFunc::Count => n as f64,
        AggFunc::Sum => sum,
        AggFunc::Avg if vals.is_empty() => 0.0,
        AggFunc::Avg => sum / vals.len() as f64,
        AggFunc::None => 0.0,
    }
}

#[allow(clippy::too_many_arguments)]
fn subquery_aggregate(
    full: &Table,
    slot_idx: &[usize],
    ops: &[crate::types::CmpOp],
    func: AggFunc,
    input: Option<usize>,
    scale: f64,
    output_type: DataType,
    workload: usize,
    seed: u64,
    encoder: FeatureEncoder,
) -> Result<Prepared, RewriteError> {
    if full.rows.is_empty() {
        return Err(RewriteError::Training("subquery is empty; no workload to sample".into()));
    }
    let mut rng = NoiseRng::new(seed);
    let mut data = Dataset::default();
    let mut cases = Vec::new();
    for _ in 0..workload.max(1) {
        // one row per slot: a shared row would make `a > x AND a < x` empty
        let lits: Vec<Value> = slot_idx.iter().map(|&i| full.rows[rng.below(full.rows.len())][i].clone()).collect();
        let v = aggregate_at(full, slot_idx, ops, &lits, func, input);
        data.push(encoder.encode(&lits), Target::Values(vec![v / scale]));
        let expect = if output_type == DataType::Int64 { Value::Int(v.round() as i64) } else { Value::Float(v) };
        cases.push((lits, vec![expect]));
    }
    Ok(Prepared {
        data,
        encoder,
        decoder: OutputDecoder::Scalar {
            mean: 0.0,
            std: scale,
            integral: output_type == DataType::Int64,
            range: Some((if func == AggFunc::Count { 0.0 } else { -scale }, scale)),
        },
        fingerprint: fingerprint(&full.csv_bytes()),
        cases,
    })
}
