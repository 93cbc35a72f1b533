//! Bottom-up IR interpreter with bag semantics, and the budgeted `execute`
//! entry point that debits the ledger before reading any data.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::table::{Table, TableSet};
use crate::catalog::ledger::{quantize_up, to_nano};
use crate::catalog::{BudgetLedger, CatalogError};
use crate::dp::{derive_seed, laplace_scale, NoiseRng};
use crate::frontend::AggFunc;
use crate::ir::{AggSpec, IrGraph, NodeId, NodeKind, NoisyAggSpec, Predicate, Term};
use crate::learn::{knn_predict, LearnError, ModelArtifact, ModelRegistry, NoisyStore};
use crate::types::{Column, DataType, Value, ValueKey};

#[derive(Debug, thiserror::Error)]
pub enum ExecError {
    #[error(transparent)]
    Budget(CatalogError),
    #[error("model '{0}' is not available")]
    ModelMissing(String),
    #[error("type error: {0}")]
    TypeError(String),
    #[error("table '{0}' is not loaded")]
    UnknownTable(String),
    #[error(transparent)]
    Model(#[from] LearnError),
    #[error(transparent)]
    Dp(#[from] crate::dp::DpError),
}

impl ExecError {
    pub fn is_insufficient_budget(&self) -> bool {
        matches!(self, ExecError::Budget(CatalogError::InsufficientBudget { .. }))
    }
}

/// Anything that maps one input tuple to output rows. Per-row models
/// (`keep_input` Predict nodes) must return exactly one row.
pub trait Predictor: Send + Sync {
    fn predict(&self, inputs: &[Value]) -> Result<Vec<Vec<Value>>, ExecError>;
}

impl Predictor for ModelArtifact {
    fn predict(&self, inputs: &[Value]) -> Result<Vec<Vec<Value>>, ExecError> {
        Ok(vec![self.predict_row(inputs)?])
    }
}

/// A predictor backed by a plain function.
pub struct FnPredictor<F>(pub F);

impl<F> Predictor for FnPredictor<F>
where
    F: Fn(&[Value]) -> Vec<Vec<Value>> + Send + Sync,
{
    fn predict(&self, inputs: &[Value]) -> Result<Vec<Vec<Value>>, ExecError> {
        Ok((self.0)(inputs))
    }
}

/// Deterministic lookup-table model: exact input tuple → output rows.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LookupPredictor {
    pub entries: Vec<(Vec<Value>, Vec<Vec<Value>>)>,
    /// Returned for unseen inputs.
    pub default: Vec<Vec<Value>>,
}

impl Predictor for LookupPredictor {
    fn predict(&self, inputs: &[Value]) -> Result<Vec<Vec<Value>>, ExecError> {
        let k: Vec<ValueKey> = inputs.iter().map(Value::key).collect();
        Ok(self
            .entries
            .iter()
            .find(|(x, _)| x.len() == k.len() && x.iter().zip(&k).all(|(a, b)| a.key() == *b))
            .map_or_else(|| self.default.clone(), |(_, y)| y.clone()))
    }
}

/// Original model-call implementations by function name.
pub type FunctionModels = BTreeMap<String, Arc<dyn Predictor>>;

#[derive(Clone, Copy)]
pub struct ExecContext<'a> {
    pub tables: &'a TableSet,
    pub functions: &'a FunctionModels,
    pub registry: &'a ModelRegistry,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MechanismTrace {
    pub node: NodeId,
    pub mechanism: String,
    pub parameters: BTreeMap<String, f64>,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReceipt {
    pub plan_id: String,
    pub user: String,
    pub datasets: Vec<String>,
    pub epsilon_charged: f64,
    pub debit_seq: u64,
    pub wall_latency_ms: f64,
    pub rows_out: usize,
    pub mechanisms: Vec<MechanismTrace>,
}

/// Per-node ε rounded up to the ledger's quantum, so that the node sum and
/// the debit agree exactly.
pub fn node_epsilon(kind: &NodeKind) -> f64 {
    let e = kind.epsilon();
    if e > 0.0 {
        quantize_up(e)
    } else {
        0.0
    }
}

pub fn plan_epsilon(ir: &IrGraph) -> f64 {
    let nano: u64 = ir.nodes.iter().map(|n| to_nano(node_epsilon(&n.kind))).sum();
    nano as f64 / 1e9
}

/// Debits `plan_epsilon(ir)` from every base relation of the plan and the
/// user, then evaluates. Nothing is read when the debit fails.
pub fn execute(ir: &IrGraph, ctx: ExecContext<'_>, ledger: &mut BudgetLedger, user: &str, plan_id: &str) -> Result<(Table, ExecutionReceipt), ExecError> {
    let datasets = ir.relations();
    let eps = plan_epsilon(ir);
    let (seq, charged) = ledger.debit_many(&datasets, user, eps, plan_id).map_err(ExecError::Budget)?;
    let start = Instant::now();
    let (table, mechanisms) = evaluate(ir, ctx, seq)?;
    Ok((
        table.clone(),
        ExecutionReceipt {
            plan_id: plan_id.to_string(),
            user: user.to_string(),
            datasets,
            epsilon_charged: charged,
            debit_seq: seq,
            wall_latency_ms: start.elapsed().as_secs_f64() * 1e3,
            rows_out: table.len(),
            mechanisms,
        },
    ))
}

/// Evaluates without touching the ledger. `nonce` is mixed into every
/// mechanism seed so repeated executions draw fresh noise.
pub fn evaluate(ir: &IrGraph, ctx: ExecContext<'_>, nonce: u64) -> Result<(Table, Vec<MechanismTrace>), ExecError> {
    if ir.nodes.is_empty() {
        return Err(ExecError::TypeError("empty plan".into()));
    }
    let mut results: Vec<Option<Table>> = vec![None; ir.nodes.len()];
    let mut remaining_uses: Vec<usize> = vec![0; ir.nodes.len()];
    for n in &ir.nodes {
        for c in &n.children {
            remaining_uses[*c] += 1;
        }
    }
    let mut trace = Vec::new();
    for n in &ir.nodes {
        let mut take = |c: NodeId, results: &mut Vec<Option<Table>>| -> Table {
            remaining_uses[c] -= 1;
            if remaining_uses[c] == 0 {
                results[c].take().expect("child evaluated")
            } else {
                results[c].clone().expect("child evaluated")
            }
        };
        let schema = ir.edges[n.id].schema.clone();
        let out = match &n.kind {
            NodeKind::Scan { relation, qualifier, columns, .. } => scan(ctx.tables, relation, qualifier, columns)?,
            NodeKind::Select { predicates } => {
                let mut t = take(n.children[0], &mut results);
                let idx = predicate_indices(&t, predicates)?;
                t.rows.retain(|r| predicates.iter().zip(&idx).all(|(p, i)| holds(p, i, r)));
                t
            }
            NodeKind::Project { attributes } => {
                let t = take(n.children[0], &mut results);
                let idx = indices(&t, attributes)?;
                Table { columns: schema, rows: t.rows.iter().map(|r| idx.iter().map(|&i| r[i].clone()).collect()).collect() }
            }
            NodeKind::Join { left_key, right_key } => {
                let l = take(n.children[0], &mut results);
                let r = take(n.children[1], &mut results);
                hash_join(l, r, left_key, right_key, schema)?
            }
            NodeKind::Aggregate { group_keys, outputs } => {
                let t = take(n.children[0], &mut results);
                aggregate(&t, group_keys, outputs, schema)?
            }
            NodeKind::Predict { model, inputs, outputs, keep_input, .. } => {
                let t = take(n.children[0], &mut results);
                let predictor: &dyn Predictor = match &model.artifact {
                    // a stub registered under the artifact id stands in for it
                    Some(id) => match ctx.registry.get(id) {
                        Some(a) => a,
                        None => ctx.functions.get(id).ok_or_else(|| ExecError::ModelMissing(id.clone()))?.as_ref(),
                    },
                    None => ctx.functions.get(&model.function).ok_or_else(|| ExecError::ModelMissing(model.function.clone()))?.as_ref(),
                };
                let e = node_epsilon(&n.kind);
                if e > 0.0 {
                    trace.push(MechanismTrace {
                        node: n.id,
                        mechanism: "dp-model".into(),
                        parameters: BTreeMap::new(),
                        epsilon: e,
                    });
                }
                predict(t, predictor, inputs, outputs, *keep_input, schema)?
            }
            NodeKind::Constant { row, .. } => Table { columns: schema, rows: vec![row.clone()] },
            NodeKind::NoisyAggregate { outputs, seed } => {
                let t = take(n.children[0], &mut results);
                let mut rng = NoiseRng::new(derive_seed(*seed, nonce));
                let mut row = Vec::new();
                for o in outputs {
                    let (v, params) = noisy_aggregate(&t, o, &mut rng)?;
                    row.push(v);
                    trace.push(MechanismTrace { node: n.id, mechanism: "laplace".into(), parameters: params, epsilon: quantize_up(o.epsilon) });
                }
                Table { columns: schema, rows: vec![row] }
            }
            NodeKind::NoisyEmbeddingLookup {
                encoder,
                input,
                relation,
                source_attribute,
                label_attribute,
                clip_norm,
                noise_multiplier,
                k,
                seed,
                ..
            } => {
                let mut t = take(n.children[0], &mut results);
                let enc = ctx.registry.get(encoder).ok_or_else(|| ExecError::ModelMissing(encoder.clone()))?;
                let base = ctx.tables.read(relation).ok_or_else(|| ExecError::UnknownTable(relation.clone()))?;
                let (si, li) = (col(base, source_attribute)?, col(base, label_attribute)?);
                let records: Vec<(Vec<Value>, Value)> = base.rows.iter().map(|r| (vec![r[si].clone()], r[li].clone())).collect();
                let s = derive_seed(*seed, nonce);
                let store = NoisyStore::build(enc, &records, *clip_norm, *noise_multiplier, crate::catalog::ledger::DEFAULT_DELTA, s)?;
                let ii = col(&t, input)?;
                // query-side embeddings are released through the same mechanism
                let mut qrng = NoiseRng::with_stream(s, 1);
                for r in t.rows.iter_mut() {
                    let e = enc.forward(std::slice::from_ref(&r[ii]))?;
                    let q = crate::dp::mechanisms::perturb_with(&e, *clip_norm, *noise_multiplier, &mut qrng)?;
                    let label = knn_predict(&q, &store, *k)?;
                    r.push(coerce(label, schema.last().expect("output column").data_type)?);
                }
                t.columns = schema;
                let mut params = BTreeMap::new();
                params.insert("clip_norm".into(), *clip_norm);
                params.insert("noise_multiplier".into(), *noise_multiplier);
                params.insert("k".into(), *k as f64);
                trace.push(MechanismTrace { node: n.id, mechanism: "gaussian-embedding".into(), parameters: params, epsilon: node_epsilon(&n.kind) });
                t
            }
        };
        results[n.id] = Some(out);
    }
    let t = results[ir.sink()].take().expect("sink evaluated");
    Ok((t, trace))
}

fn scan(tables: &TableSet, relation: &str, qualifier: &str, columns: &[Column]) -> Result<Table, ExecError> {
    let base = tables.read(relation).ok_or_else(|| ExecError::UnknownTable(relation.to_string()))?;
    let prefix = format!("{qualifier}.");
    let idx = columns
        .iter()
        .map(|c| {
            let bare = c.name.strip_prefix(&prefix).unwrap_or(&c.name);
            base.column_index(bare).ok_or_else(|| ExecError::TypeError(format!("table '{relation}' has no column '{bare}'")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Table { columns: columns.to_vec(), rows: base.rows.iter().map(|r| idx.iter().map(|&i| r[i].clone()).collect()).collect() })
}

fn col(t: &Table, name: &str) -> Result<usize, ExecError> {
    t.column_index(name).ok_or_else(|| ExecError::TypeError(format!("no column '{name}'")))
}

fn indices(t: &Table, names: &[String]) -> Result<Vec<usize>, ExecError> {
    names.iter().map(|n| col(t, n)).collect()
}

enum Side {
    Col(usize),
    Lit(Value),
}

fn predicate_indices(t: &Table, ps: &[Predicate]) -> Result<Vec<(Side, Side)>, ExecError> {
    let side = |term: &Term| -> Result<Side, ExecError> {
        Ok(match term {
            Term::Column(c) => Side::Col(col(t, c)?),
            Term::Literal(v) => Side::Lit(v.clone()),
        })
    };
    ps.iter().map(|p| Ok((side(&p.left)?, side(&p.right)?))).collect()
}

fn holds(p: &Predicate, sides: &(Side, Side), row: &[Value]) -> bool {
    let get = |s: &Side| -> Value {
        match s {
            Side::Col(i) => row[*i].clone(),
            Side::Lit(v) => v.clone(),
        }
    };
    p.op.eval(&get(&sides.0), &get(&sides.1)).unwrap_or(false)
}

fn hash_join(l: Table, r: Table, lk: &str, rk: &str, schema: Vec<Column>) -> Result<Table, ExecError> {
    let (li, ri) = (col(&l, lk)?, col(&r, rk)?);
    let mut index: HashMap<ValueKey, Vec<usize>> = HashMap::new();
    for (i, row) in r.rows.iter().enumerate() {
        index.entry(row[ri].key()).or_default().push(i);
    }
    let mut rows = Vec::new();
    for lrow in &l.rows {
        if let Some(matches) = index.get(&lrow[li].key()) {
            for &j in matches {
                if crate::types::CmpOp::Eq.eval(&lrow[li], &r.rows[j][ri]) == Some(true) {
                    let mut row = lrow.clone();
                    row.extend(r.rows[j].iter().cloned());
                    rows.push(row);
                }
            }
        }
    }
    Ok(Table { columns: schema, rows })
}

/// Sum in a canonical order so the result does not depend on row order.
pub(crate) fn ordered_sum(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs.iter().sum()
}

fn numeric(v: &Value) -> Result<f64, ExecError> {
    v.as_f64().ok_or_else(|| ExecError::TypeError(format!("'{v}' is not numeric")))
}

fn agg_value(spec: &AggSpec, rows: &[&Vec<Value>], input: Option<usize>) -> Result<Value, ExecError> {
    Ok(match spec.func {
        AggFunc::Count => Value::Int(rows.len() as i64),
        AggFunc::Sum | AggFunc::Avg => {
            let i = input.ok_or_else(|| ExecError::TypeError(format!("{} needs an argument", spec.output)))?;
            if spec.func == AggFunc::Sum && spec.output_type == DataType::Int64 {
                let mut s: i64 = 0;
                for r in rows {
                    match &r[i] {
                        Value::Int(x) => s = s.saturating_add(*x),
                        other => return Err(ExecError::TypeError(format!("'{other}' is not an integer"))),
                    }
                }
                Value::Int(s)
            } else {
                let xs = rows.iter().map(|r| numeric(&r[i])).collect::<Result<Vec<_>, _>>()?;
                let s = ordered_sum(xs);
                if spec.func == AggFunc::Sum {
                    Value::Float(s)
                } else if rows.is_empty() {
                    Value::Float(0.0)
                } else {
                    Value::Float(s / rows.len() as f64)
                }
            }
        }
        AggFunc::None => return Err(ExecError::TypeError("plain column in aggregate outputs".into())),
    })
}

fn aggregate(t: &Table, keys: &[String], outputs: &[AggSpec], schema: Vec<Column>) -> Result<Table, ExecError> {
    let ki = indices(t, keys)?;
    let inputs = outputs.iter().map(|o| o.input.as_ref().map(|c| col(t, c)).transpose()).collect::<Result<Vec<_>, _>>()?;
    let mut groups: BTreeMap<Vec<ValueKey>, (Vec<Value>, Vec<&Vec<Value>>)> = BTreeMap::new();
    if keys.is_empty() {
        groups.insert(vec![], (vec![], vec![]));
    }
    for r in &t.rows {
        let k: Vec<ValueKey> = ki.iter().map(|&i| r[i].key()).collect();
        groups.entry(k).or_insert_with(|| (ki.iter().map(|&i| r[i].clone()).collect(), vec![])).1.push(r);
    }
    let mut rows = Vec::new();
    for (_, (key_vals, members)) in groups {
        let mut row = key_vals;
        for (o, i) in outputs.iter().zip(&inputs) {
            row.push(agg_value(o, &members, *i)?);
        }
        rows.push(row);
    }
    Ok(Table { columns: schema, rows })
}

fn noisy_aggregate(t: &Table, o: &NoisyAggSpec, rng: &mut NoiseRng) -> Result<(Value, BTreeMap<String, f64>), ExecError> {
    let mut params = BTreeMap::new();
    let clamped = |rng: &mut NoiseRng, eps: f64| -> Result<f64, ExecError> {
        let i = col(t, o.input.as_deref().ok_or_else(|| ExecError::TypeError(format!("{} needs an argument", o.output)))?)?;
        let xs = t.rows.iter().map(|r| numeric(&r[i]).map(|x| x.clamp(-o.bound, o.bound))).collect::<Result<Vec<_>, _>>()?;
        Ok(ordered_sum(xs) + rng.laplace(laplace_scale(o.bound, eps)?))
    };
    let v = match o.func {
        AggFunc::Count => {
            params.insert("sensitivity".into(), 1.0);
            params.insert("scale".into(), laplace_scale(1.0, o.epsilon)?);
            t.len() as f64 + rng.laplace(laplace_scale(1.0, o.epsilon)?)
        }
        AggFunc::Sum => {
            params.insert("sensitivity".into(), o.bound);
            params.insert("scale".into(), laplace_scale(o.bound, o.epsilon)?);
            clamped(rng, o.epsilon)?
        }
        AggFunc::Avg => {
            let half = o.epsilon / 2.0;
            params.insert("sensitivity".into(), o.bound);
            params.insert("sum_scale".into(), laplace_scale(o.bound, half)?);
            params.insert("count_scale".into(), laplace_scale(1.0, half)?);
            let s = clamped(rng, half)?;
            let c = t.len() as f64 + rng.laplace(laplace_scale(1.0, half)?);
            (s / c.max(1.0)).clamp(-o.bound, o.bound)
        }
        AggFunc::None => return Err(ExecError::TypeError("plain column in aggregate outputs".into())),
    };
    let out = match o.output_type {
        DataType::Int64 => Value::Int(v.round() as i64),
        _ => Value::Float(v),
    };
    Ok((out, params))
}

/// Fits a predicted value to the declared output type.
fn coerce(v: Value, t: DataType) -> Result<Value, ExecError> {
    Ok(match (v, t) {
        (Value::Int(i), DataType::Float64) => Value::Float(i as f64),
        (Value::Float(x), DataType::Int64) if x.fract() == 0.0 => Value::Int(x as i64),
        (Value::Int(i), DataType::Text) => Value::Text(i.to_string()),
        (v, t) if v.data_type() == t => v,
        (v, t) => return Err(ExecError::TypeError(format!("model produced '{v}' for a {t} column"))),
    })
}

fn predict(t: Table, p: &dyn Predictor, inputs: &[String], outputs: &[Column], keep_input: bool, schema: Vec<Column>) -> Result<Table, ExecError> {
    let idx = indices(&t, inputs)?;
    let mut rows = Vec::with_capacity(t.rows.len());
    for r in t.rows {
        let x: Vec<Value> = idx.iter().map(|&i| r[i].clone()).collect();
        let ys = p.predict(&x)?;
        if keep_input && ys.len() != 1 {
            return Err(ExecError::TypeError(format!("per-row model returned {} rows", ys.len())));
        }
        for y in ys {
            if y.len() != outputs.len() {
                return Err(ExecError::TypeError(format!("model returned {} values for {} outputs", y.len(), outputs.len())));
            }
            let y = y.into_iter().zip(outputs).map(|(v, c)| coerce(v, c.data_type)).collect::<Result<Vec<_>, _>>()?;
            if keep_input {
                let mut row = r.clone();
                row.extend(y);
                rows.push(row);
            } else {
                rows.push(y);
            }
        }
    }
    Ok(Table { columns: schema, rows })
}
