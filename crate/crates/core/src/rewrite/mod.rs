//! Privacy-preserving rewrites of sensitive regions.
//!
//! Five rules, each instantiated per region and per target ε:
//!
//! * S1 swaps an original model call for a DP-trained replacement (reused
//!   from the registry, adapted from a registry trunk, or searched and
//!   trained from scratch).
//! * S2 collapses `π_A(σ_p(R))` (optionally with one model call) into a
//!   model applied to the encoded literals of `p`.
//! * S2A does the same for an ungrouped single-output aggregate over that
//!   shape; the model predicts the aggregate value.
//! * S3 answers a classification call by kNN over noisy embeddings.
//! * S4 perturbs COUNT/SUM/AVG outputs with Laplace noise.
//!
//! A candidate is kept only if, after the rewrite, taint no longer reaches
//! the sink (other regions assumed protected).

pub mod materialize;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use materialize::{materialize, MaterializeOutcome};

use crate::catalog::ledger::DEFAULT_DELTA;
use crate::catalog::{Catalog, TaintSet};
use crate::dp::{calibrate_noise_multiplier, derive_seed, DpSgdConfig};
use crate::exec::TableSet;
use crate::frontend::AggFunc;
use crate::ir::{AggSpec, ChildRef, IrError, IrGraph, ModelRef, NodeId, NodeKind, NoisyAggSpec, Predicate};
use crate::learn::{registry_match, ModelArtifact, ModelRegistry, ModelSignature, RegistryMatch, SearchOptions};
use crate::taint::{propagate_sanitized, SensitiveRegion};
use crate::types::{fingerprint, CmpOp, Column, DataType, Task, Value};

/// Target ε values instantiated for every trainable or mechanism-based rule.
pub const EPSILON_GRID: [f64; 7] = [0.5, 1.0, 2.0, 4.0, 6.0, 8.0, 16.0];
pub const DEFAULT_TRAIN_STEPS: u64 = 100;
pub const DEFAULT_SEARCH_STEPS: usize = 15;
pub const DEFAULT_WORKLOAD: usize = 256;
pub const SEARCH_WIDTHS: [usize; 4] = [0, 8, 16, 32];
pub const KNN_CLIP_NORM: f64 = 1.0;
pub const KNN_K: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RuleId {
    #[serde(rename = "S1_ModelReplacePredict")]
    S1ModelReplacePredict,
    #[serde(rename = "S2_ModelReplaceSubquery")]
    S2ModelReplaceSubquery,
    #[serde(rename = "S2A_ModelReplaceAggregate")]
    S2AModelReplaceAggregate,
    #[serde(rename = "S3_NoisyEmbeddingKnn")]
    S3NoisyEmbeddingKnn,
    #[serde(rename = "S4_OutputPerturbation")]
    S4OutputPerturbation,
}

impl RuleId {
    pub fn short(self) -> &'static str {
        match self {
            RuleId::S1ModelReplacePredict => "S1",
            RuleId::S2ModelReplaceSubquery => "S2",
            RuleId::S2AModelReplaceAggregate => "S2A",
            RuleId::S3NoisyEmbeddingKnn => "S3",
            RuleId::S4OutputPerturbation => "S4",
        }
    }
}

impl fmt::Display for RuleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

/// Region replacement relative to the IR it was enumerated on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewriteSpec {
    pub root: NodeId,
    pub region: BTreeSet<NodeId>,
    pub replacement: Vec<(NodeKind, Vec<ChildRef>)>,
}

/// One literal conjunct of a rule-2 pattern: `column op <literal>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    pub column: String,
    pub op: CmpOp,
    pub data_type: DataType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SubqueryTarget {
    /// Model returns the projected row for the literal tuple.
    Rows { attributes: Vec<String> },
    /// Model returns the aggregate value, trained on `value / scale`.
    Aggregate { spec: AggSpec, scale: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainingSource {
    /// `(inputs…, label)` pairs read from a labelled relation.
    Labelled { relation: String, inputs: Vec<String>, label: String },
    /// Examples generated by evaluating the region's chain (literal
    /// conjuncts removed) and applying sampled literal tuples.
    Subquery { relation: String, chain: IrGraph, slots: Vec<Slot>, target: SubqueryTarget, workload: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainingMethod {
    /// DNAS over `blocks`, then DP-SGD from the reset weights.
    Search { blocks: Vec<Vec<usize>>, options: SearchOptions },
    /// Frozen trunk of a registry artifact plus a new trainable head.
    Transfer { base: String, frozen_prefix_layers: usize },
    /// Fixed hidden widths, DP-SGD only.
    Fixed { hidden: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingRequest {
    /// Registry id the trained model is stored under; derived from the
    /// request content so identical requests share one artifact.
    pub artifact_id: String,
    pub function: String,
    pub signature: ModelSignature,
    pub source: TrainingSource,
    pub method: TrainingMethod,
    pub dpsgd: DpSgdConfig,
    pub target_epsilon: f64,
}

impl TrainingRequest {
    fn with_content_id(mut self) -> Self {
        self.artifact_id = String::new();
        let bytes = serde_json::to_vec(&self).expect("serializable");
        self.artifact_id = format!("m-{:016x}", fingerprint(&bytes));
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelBinding {
    Existing { artifact_id: String },
    Train(Box<TrainingRequest>),
    None,
}

impl ModelBinding {
    pub fn artifact_id(&self) -> Option<&str> {
        match self {
            ModelBinding::Existing { artifact_id } => Some(artifact_id),
            ModelBinding::Train(r) => Some(&r.artifact_id),
            ModelBinding::None => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidatePlan {
    pub plan_id: String,
    pub region_root: NodeId,
    pub rule: RuleId,
    /// Cost-model family, e.g. `S1:transfer`.
    pub scheme: String,
    /// What the plan computes, for cost-model lookups (function or relation).
    pub task_key: String,
    pub epsilon: f64,
    pub model_binding: ModelBinding,
    pub spec: RewriteSpec,
    /// The base IR with only this region rewritten.
    pub rewritten: IrGraph,
    pub explanation: String,
    /// Rows the plan's model trains on (0 when nothing is trained).
    pub training_rows: u64,
    #[serde(default)]
    pub cost: Option<crate::optimizer::CostVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DroppedPlan {
    pub region_root: NodeId,
    pub rule: RuleId,
    pub scheme: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Enumeration {
    pub plans: Vec<CandidatePlan>,
    pub dropped: Vec<DroppedPlan>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewriteError {
    #[error("model signature does not match the plan: {0}")]
    SignatureMismatch(String),
    #[error("rewritten plan changes the sink schema")]
    SchemaChanged,
    #[error(transparent)]
    Ir(#[from] IrError),
    #[error("training failed: {0}")]
    Training(String),
}

pub struct EnumerateInput<'a> {
    /// Output of taint propagation.
    pub annotated: &'a IrGraph,
    pub regions: &'a [SensitiveRegion],
    pub catalog: &'a Catalog,
    pub taints: &'a TaintSet,
    pub registry: &'a ModelRegistry,
    pub tables: Option<&'a TableSet>,
    /// min(dataset remainders, user remainder).
    pub budget_remaining: f64,
    pub seed: u64,
}

fn eps_label(e: f64) -> String {
    format!("{e}")
}

/// Applies specs enumerated on the same base IR, one region at a time.
pub fn apply_all(base: &IrGraph, specs: &[&RewriteSpec]) -> Result<IrGraph, RewriteError> {
    let mut g = base.clone();
    let mut map: Vec<Option<NodeId>> = (0..base.nodes.len()).map(Some).collect();
    for s in specs {
        let m = |old: NodeId| map[old].ok_or(RewriteError::Ir(IrError::Malformed { node: old, message: "region overlaps an earlier rewrite".into() }));
        let root = m(s.root)?;
        let region = s.region.iter().map(|&r| m(r)).collect::<Result<BTreeSet<_>, _>>()?;
        let replacement = s
            .replacement
            .iter()
            .map(|(k, ch)| {
                let ch = ch
                    .iter()
                    .map(|c| match c {
                        ChildRef::Kept(k) => m(*k).map(ChildRef::Kept),
                        ChildRef::Local(i) => Ok(ChildRef::Local(*i)),
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                Ok((k.clone(), ch))
            })
            .collect::<Result<Vec<_>, RewriteError>>()?;
        let (next, step) = g.splice_mapped(root, &region, replacement)?;
        map = map.into_iter().map(|o| o.and_then(|i| step[i])).collect();
        g = next;
    }
    if g.sink_schema() != base.sink_schema() {
        return Err(RewriteError::SchemaChanged);
    }
    Ok(g)
}

/// Rewrites `base` with `plan`, checking that `model` (when the plan binds
/// one) fits the replacement.
pub fn apply(base: &IrGraph, plan: &CandidatePlan, model: Option<&ModelArtifact>) -> Result<IrGraph, RewriteError> {
    if let (Some(id), Some(m)) = (plan.model_binding.artifact_id(), model) {
        if m.id != id {
            return Err(RewriteError::SignatureMismatch(format!("plan binds '{id}', got '{}'", m.id)));
        }
        for (kind, _) in &plan.spec.replacement {
            if let NodeKind::Predict { inputs, outputs, task, .. } = kind {
                let arity_ok = m.signature.input_types.len() == inputs.len();
                let task_ok = m.signature.task == *task;
                let out_ok = outputs.len() == 1 || matches!(m.decoder, crate::learn::OutputDecoder::Classes { ref rows } if rows.iter().all(|r| r.len() == outputs.len()));
                if !(arity_ok && task_ok && out_ok) {
                    return Err(RewriteError::SignatureMismatch(format!("model '{}' does not fit {}", m.id, kind)));
                }
            }
        }
    }
    apply_all(base, &[&plan.spec])
}

struct Ctx<'a, 'b> {
    input: &'b EnumerateInput<'a>,
    out: Enumeration,
}

impl Ctx<'_, '_> {
    fn drop(&mut self, region: &SensitiveRegion, rule: RuleId, scheme: &str, reason: impl Into<String>) {
        self.out.dropped.push(DroppedPlan { region_root: region.root, rule, scheme: scheme.into(), reason: reason.into() });
    }

    /// Grid targets that fit the budget; records a drop when none does.
    fn targets(&mut self, region: &SensitiveRegion, rule: RuleId, scheme: &str) -> Vec<f64> {
        let b = self.input.budget_remaining;
        let t: Vec<f64> = EPSILON_GRID.iter().copied().filter(|e| *e <= b + 1e-12).collect();
        if t.is_empty() {
            self.drop(region, rule, scheme, format!("minimum feasible ε {} exceeds the remaining budget {b}", EPSILON_GRID[0]));
        }
        t
    }

    #[allow(clippy::too_many_arguments)]
    fn push(
        &mut self,
        region: &SensitiveRegion,
        rule: RuleId,
        scheme: &str,
        task_key: String,
        epsilon: f64,
        binding: ModelBinding,
        spec: RewriteSpec,
        explanation: String,
        training_rows: u64,
    ) {
        let base = self.input.annotated;
        let rewritten = match apply_all(base, &[&spec]) {
            Ok(g) => g,
            Err(e) => return self.drop(region, rule, scheme, format!("rewrite failed: {e}")),
        };
        if !self.protects(region, &spec, &rewritten) {
            return self.drop(region, rule, scheme, "taint still reaches the query output after this rewrite");
        }
        let plan_id = format!("r{}-{}-e{}", region.root, scheme.replace(':', "-"), eps_label(epsilon));
        self.out.plans.push(CandidatePlan {
            plan_id,
            region_root: region.root,
            rule,
            scheme: scheme.into(),
            task_key,
            epsilon,
            model_binding: binding,
            spec,
            rewritten,
            explanation,
            training_rows,
            cost: None,
        });
    }

    fn protects(&self, region: &SensitiveRegion, spec: &RewriteSpec, rewritten: &IrGraph) -> bool {
        // Re-derive where the other regions' roots went.
        let Ok((_, map)) = self.input.annotated.splice_mapped(spec.root, &spec.region, spec.replacement.clone()) else { return false };
        let sanitized: BTreeSet<NodeId> =
            self.input.regions.iter().filter(|r| r.root != region.root).filter_map(|r| map[r.root]).collect();
        let g = propagate_sanitized(rewritten, self.input.taints, self.input.tables, &sanitized);
        !g.edges[g.sink()].taint.is_tainted()
    }
}

/// Instantiates every applicable rule for every anchored region.
pub fn enumerate(input: &EnumerateInput<'_>) -> Enumeration {
    let mut cx = Ctx { input, out: Enumeration::default() };
    for region in input.regions {
        if !region.anchored {
            cx.drop(region, RuleId::S1ModelReplacePredict, "-", format!("no rewrite rule anchors at {} #{}", input.annotated.nodes[region.root].kind.name(), region.root));
            continue;
        }
        rule_s1(&mut cx, region);
        rule_s2(&mut cx, region);
        rule_s2a(&mut cx, region);
        rule_s3(&mut cx, region);
        rule_s4(&mut cx, region);
    }
    cx.out
}

fn original_predicts(g: &IrGraph, region: &SensitiveRegion) -> Vec<NodeId> {
    region
        .member_nodes
        .iter()
        .copied()
        .filter(|&m| matches!(&g.nodes[m].kind, NodeKind::Predict { keep_input: true, model, .. } if model.artifact.is_none()))
        .collect()
}

/// Registry signature of a catalog model-call function.
pub fn signature_for(catalog: &Catalog, function: &str) -> Option<ModelSignature> {
    let f = catalog.function(function)?;
    let labels = f
        .output_labels
        .iter()
        .map(|l| match f.output_type {
            DataType::Int64 => l.parse().map(Value::Int).unwrap_or_else(|_| Value::text(l.clone())),
            DataType::Float64 => l.parse().map(Value::Float).unwrap_or_else(|_| Value::text(l.clone())),
            _ => Value::text(l.clone()),
        })
        .collect();
    Some(ModelSignature { input_types: f.input_types.clone(), output_type: f.output_type, task: f.task, output_labels: labels })
}

/// Labelled training source of a model call, if the catalog names one whose
/// relation holds the call's argument attributes.
fn labelled_source(catalog: &Catalog, function: &str, inputs: &[String]) -> Option<(TrainingSource, u64)> {
    let f = catalog.function(function)?;
    let rel = catalog.relation(f.relation.as_deref()?)?;
    let label = f.label_attribute.clone()?;
    rel.attribute(&label)?;
    let bare: Vec<String> = inputs.iter().map(|c| c.rsplit_once('.').map_or(c.clone(), |(_, a)| a.to_string())).collect();
    if bare.iter().any(|a| rel.attribute(a).is_none()) {
        return None;
    }
    Some((TrainingSource::Labelled { relation: rel.name.clone(), inputs: bare, label }, rel.row_count_estimate))
}

fn dpsgd_for(target: f64, seed: u64) -> Option<DpSgdConfig> {
    let sigma = calibrate_noise_multiplier(target, DEFAULT_TRAIN_STEPS, DEFAULT_DELTA)?;
    Some(DpSgdConfig { noise_multiplier: sigma, steps: DEFAULT_TRAIN_STEPS, sampling_rate: 1.0, seed, ..DpSgdConfig::default() })
}

fn search_method(seed: u64, task: Task) -> TrainingMethod {
    TrainingMethod::Search {
        blocks: vec![SEARCH_WIDTHS.to_vec(); 2],
        options: SearchOptions {
            steps: DEFAULT_SEARCH_STEPS,
            learning_rate: 0.1,
            theta_learning_rate: 0.5,
            lambda_cost: 0.01,
            seed,
            loss: loss_for(task),
        },
    }
}

pub(crate) fn loss_for(task: Task) -> crate::learn::Loss {
    match task {
        Task::Regression => crate::learn::Loss::SquaredError,
        _ => crate::learn::Loss::CrossEntropy,
    }
}

fn rule_s1(cx: &mut Ctx<'_, '_>, region: &SensitiveRegion) {
    let rule = RuleId::S1ModelReplacePredict;
    let g = cx.input.annotated;
    let predicts = original_predicts(g, region);
    if predicts.is_empty() {
        return;
    }
    if predicts.len() > 1 {
        return cx.drop(region, rule, "S1", "region holds more than one model call");
    }
    let p = predicts[0];
    let NodeKind::Predict { model, task, inputs, outputs, .. } = &g.nodes[p].kind else { unreachable!() };
    let child = g.nodes[p].children[0];
    let Some(sig) = signature_for(cx.input.catalog, &model.function) else {
        return cx.drop(region, rule, "S1", format!("no signature for '{}'", model.function));
    };
    let source = labelled_source(cx.input.catalog, &model.function, inputs);
    let fp = source.as_ref().and_then(|(s, _)| match s {
        TrainingSource::Labelled { relation, .. } => cx.input.tables.and_then(|t| t.peek(relation)).map(|t| fingerprint(&t.csv_bytes())),
        _ => None,
    });
    let spec_for = |artifact: &str, eps: f64| RewriteSpec {
        root: p,
        region: BTreeSet::from([p]),
        replacement: vec![(
            NodeKind::Predict {
                model: ModelRef { function: model.function.clone(), artifact: Some(artifact.to_string()), epsilon: eps },
                task: *task,
                inputs: inputs.clone(),
                outputs: outputs.clone(),
                keep_input: true,
            },
            vec![ChildRef::Kept(child)],
        )],
    };
    let m = registry_match(&sig, fp, cx.input.registry);
    if let RegistryMatch::Exact { artifact_id } = &m {
        let a = cx.input.registry.get(artifact_id).expect("matched");
        match a.provenance.epsilon_spent {
            Some(e) if e > 0.0 && e.is_finite() => {
                if e > cx.input.budget_remaining {
                    cx.drop(region, rule, "S1:reuse", format!("model ε {e} exceeds the remaining budget {}", cx.input.budget_remaining));
                } else {
                    let spec = spec_for(artifact_id, e);
                    let expl = format!("S1: reuse DP model {artifact_id} for {} (trained at ε={e})", model.function);
                    cx.push(region, rule, "S1:reuse", model.function.clone(), e, ModelBinding::Existing { artifact_id: artifact_id.clone() }, spec, expl, 0);
                }
            }
            _ => cx.drop(region, rule, "S1:reuse", format!("registry match {artifact_id} was not trained with DP")),
        }
    }
    let Some((source, rows)) = source else {
        return cx.drop(region, rule, "S1:scratch", format!("'{}' has no labelled training relation", model.function));
    };
    let mut variants: Vec<(&str, TrainingMethod)> = Vec::new();
    if let RegistryMatch::Adapt { artifact_id, frozen_prefix_layers } = &m {
        variants.push(("S1:transfer", TrainingMethod::Transfer { base: artifact_id.clone(), frozen_prefix_layers: *frozen_prefix_layers }));
    }
    variants.push(("S1:scratch", search_method(derive_seed(cx.input.seed, p as u64), *task)));
    for (scheme, method) in variants {
        for (i, eps) in cx.targets(region, rule, scheme).into_iter().enumerate() {
            let Some(cfg) = dpsgd_for(eps, derive_seed(cx.input.seed, (p * 100 + i) as u64)) else { continue };
            let req = TrainingRequest {
                artifact_id: String::new(),
                function: model.function.clone(),
                signature: sig.clone(),
                source: source.clone(),
                method: method.clone(),
                dpsgd: cfg.clone(),
                target_epsilon: eps,
            }
            .with_content_id();
            let how = match &method {
                TrainingMethod::Transfer { base, frozen_prefix_layers } => format!("adapt {base} (freeze {frozen_prefix_layers} layer(s), new head)"),
                _ => "search an architecture (DNAS) and train".to_string(),
            };
            let expl = format!(
                "{}: replace {} with a DP-SGD model; {how}; σ={:.3}, C={}, T={}, ε={eps}",
                rule.short(),
                model.function,
                cfg.noise_multiplier,
                cfg.clip_norm,
                cfg.steps
            );
            let spec = spec_for(&req.artifact_id, eps);
            cx.push(region, rule, scheme, model.function.clone(), eps, ModelBinding::Train(Box::new(req)), spec, expl, rows);
        }
    }
}

/// `(scan, nodes bottom-up excluding the root, literal slots)` of a
/// single-relation Select/Predict chain below `root`, if it is one.
fn chain_below(g: &IrGraph, root: NodeId) -> Option<(NodeId, Vec<NodeId>, Vec<(Slot, Value)>)> {
    let mut nodes = Vec::new();
    let mut predicts = 0;
    let mut cur = g.nodes[root].children.first().copied();
    let scan = loop {
        let c = cur?;
        match &g.nodes[c].kind {
            NodeKind::Scan { .. } => break c,
            NodeKind::Select { .. } => nodes.push(c),
            NodeKind::Predict { keep_input: true, model, .. } if model.artifact.is_none() => {
                predicts += 1;
                nodes.push(c);
            }
            _ => return None,
        }
        cur = g.nodes[c].children.first().copied();
    };
    if predicts > 1 {
        return None;
    }
    nodes.reverse();
    let mut slots = Vec::new();
    for &n in &nodes {
        if let NodeKind::Select { predicates } = &g.nodes[n].kind {
            for p in predicates {
                if let Some((c, op, v)) = p.as_column_literal() {
                    let t = g.edges[n].schema.iter().find(|col| col.name == c).map(|col| col.data_type)?;
                    slots.push((Slot { column: c.to_string(), op, data_type: t }, v.clone()));
                }
            }
        }
    }
    Some((scan, nodes, slots))
}

/// The chain re-built without its literal conjuncts: evaluating it yields
/// every row any literal tuple could select.
fn stripped_chain(g: &IrGraph, scan: NodeId, nodes: &[NodeId]) -> Result<IrGraph, IrError> {
    let mut out = IrGraph::new();
    let mut cur = out.push(g.nodes[scan].kind.clone(), vec![])?;
    for &n in nodes {
        match &g.nodes[n].kind {
            NodeKind::Select { predicates } => {
                let rest: Vec<Predicate> = predicates.iter().filter(|p| p.as_column_literal().is_none()).cloned().collect();
                if !rest.is_empty() {
                    cur = out.push(NodeKind::Select { predicates: rest }, vec![cur])?;
                }
            }
            other => cur = out.push(other.clone(), vec![cur])?,
        }
    }
    Ok(out)
}

fn slot_columns(slots: &[(Slot, Value)]) -> (Vec<Column>, Vec<Value>) {
    slots
        .iter()
        .enumerate()
        .map(|(i, (s, v))| (Column::new(format!("$p{i}:{}{}", s.column, s.op.symbol()), s.data_type), v.clone()))
        .unzip()
}

/// Replacement for rule 2 shapes: `Constant(encoded p) → Predict(λ′)`.
fn collapse_spec(
    g: &IrGraph,
    region: &SensitiveRegion,
    slots: &[(Slot, Value)],
    function: &str,
    artifact: &str,
    eps: f64,
    task: Task,
) -> RewriteSpec {
    let (columns, row) = slot_columns(slots);
    let inputs = columns.iter().map(|c| c.name.clone()).collect();
    let outputs = g.edges[region.root].schema.clone();
    RewriteSpec {
        root: region.root,
        region: region.member_nodes.clone(),
        replacement: vec![
            (NodeKind::Constant { columns, row }, vec![]),
            (
                NodeKind::Predict {
                    model: ModelRef { function: function.to_string(), artifact: Some(artifact.to_string()), epsilon: eps },
                    task,
                    inputs,
                    outputs,
                    keep_input: false,
                },
                vec![ChildRef::Local(0)],
            ),
        ],
    }
}

fn rule2_common(
    cx: &mut Ctx<'_, '_>,
    region: &SensitiveRegion,
    rule: RuleId,
    scan: NodeId,
    nodes: &[NodeId],
    slots: Vec<(Slot, Value)>,
    target: SubqueryTarget,
    task: Task,
    signature: ModelSignature,
) {
    let g = cx.input.annotated;
    let scheme = format!("{}:scratch", rule.short());
    let NodeKind::Scan { relation, row_count, .. } = &g.nodes[scan].kind else { unreachable!() };
    let chain = match stripped_chain(g, scan, nodes) {
        Ok(c) => c,
        Err(e) => return cx.drop(region, rule, &scheme, format!("cannot isolate the subquery: {e}")),
    };
    let function = format!("subquery:{relation}");
    let source = TrainingSource::Subquery {
        relation: relation.clone(),
        chain,
        slots: slots.iter().map(|(s, _)| s.clone()).collect(),
        target,
        workload: DEFAULT_WORKLOAD,
    };
    for (i, eps) in cx.targets(region, rule, &scheme).into_iter().enumerate() {
        let Some(cfg) = dpsgd_for(eps, derive_seed(cx.input.seed, (region.root * 100 + 50 + i) as u64)) else { continue };
        let req = TrainingRequest {
            artifact_id: String::new(),
            function: function.clone(),
            signature: signature.clone(),
            source: source.clone(),
            method: search_method(derive_seed(cx.input.seed, region.root as u64), task),
            dpsgd: cfg.clone(),
            target_epsilon: eps,
        }
        .with_content_id();
        let lits: Vec<String> = slots.iter().map(|(s, v)| format!("{} {} {}", s.column, s.op, crate::ir::Term::Literal(v.clone()))).collect();
        let expl = format!(
            "{}: answer the subquery over {relation} with a DP-SGD model of the encoded predicate ({}); σ={:.3}, T={}, ε={eps}",
            rule.short(),
            lits.join(", "),
            cfg.noise_multiplier,
            cfg.steps
        );
        let spec = collapse_spec(g, region, &slots, &function, &req.artifact_id, eps, task);
        cx.push(region, rule, &scheme, function.clone(), eps, ModelBinding::Train(Box::new(req)), spec, expl, *row_count);
    }
}

fn rule_s2(cx: &mut Ctx<'_, '_>, region: &SensitiveRegion) {
    let rule = RuleId::S2ModelReplaceSubquery;
    let g = cx.input.annotated;
    let NodeKind::Project { attributes } = &g.nodes[region.root].kind else { return };
    let Some((scan, nodes, slots)) = chain_below(g, region.root) else { return };
    if slots.is_empty() {
        return cx.drop(region, rule, "S2:scratch", "the selection has no literal conjunct to parameterize");
    }
    if slots.iter().any(|(s, _)| s.op != CmpOp::Eq) {
        return cx.drop(region, rule, "S2:scratch", "only equality literals can key a row-returning model");
    }
    let outputs = &g.edges[region.root].schema;
    let task = if outputs.iter().any(|c| c.data_type == DataType::Blob) { Task::BlobRetrieval } else { Task::Classification };
    let signature = ModelSignature {
        input_types: slots.iter().map(|(s, _)| s.data_type).collect(),
        output_type: if outputs.len() == 1 { outputs[0].data_type } else { DataType::Blob },
        task,
        output_labels: vec![],
    };
    let target = SubqueryTarget::Rows { attributes: attributes.clone() };
    rule2_common(cx, region, rule, scan, &nodes, slots, target, task, signature);
}

fn rule_s2a(cx: &mut Ctx<'_, '_>, region: &SensitiveRegion) {
    let rule = RuleId::S2AModelReplaceAggregate;
    let g = cx.input.annotated;
    let NodeKind::Aggregate { group_keys, outputs } = &g.nodes[region.root].kind else { return };
    if !group_keys.is_empty() || outputs.len() != 1 {
        return cx.drop(region, rule, "S2A:scratch", "needs exactly one ungrouped aggregate");
    }
    let Some((scan, nodes, slots)) = chain_below(g, region.root) else {
        return cx.drop(region, rule, "S2A:scratch", "aggregate input is not a single-relation select/predict chain");
    };
    if slots.is_empty() {
        return cx.drop(region, rule, "S2A:scratch", "the selection has no literal conjunct to parameterize");
    }
    let spec = outputs[0].clone();
    let NodeKind::Scan { relation, row_count, .. } = &g.nodes[scan].kind else { unreachable!() };
    let bound = spec.input.as_deref().and_then(|c| attribute_bound(cx.input.catalog, relation, c));
    let scale = match spec.func {
        AggFunc::Count => (*row_count).max(1) as f64,
        AggFunc::Sum => match bound {
            Some(b) => b * (*row_count).max(1) as f64,
            None => return cx.drop(region, rule, "S2A:scratch", "SUM needs a declared sum_bound to scale its target"),
        },
        AggFunc::Avg => match bound {
            Some(b) => b,
            None => return cx.drop(region, rule, "S2A:scratch", "AVG needs a declared sum_bound to scale its target"),
        },
        AggFunc::None => return,
    };
    let signature = ModelSignature {
        input_types: slots.iter().map(|(s, _)| s.data_type).collect(),
        output_type: spec.output_type,
        task: Task::Regression,
        output_labels: vec![],
    };
    rule2_common(cx, region, rule, scan, &nodes, slots, SubqueryTarget::Aggregate { spec, scale }, Task::Regression, signature);
}

fn rule_s3(cx: &mut Ctx<'_, '_>, region: &SensitiveRegion) {
    let rule = RuleId::S3NoisyEmbeddingKnn;
    let g = cx.input.annotated;
    let predicts = original_predicts(g, region);
    if predicts.len() != 1 {
        return;
    }
    let p = predicts[0];
    let NodeKind::Predict { model, task, inputs, outputs, .. } = &g.nodes[p].kind else { unreachable!() };
    if *task != Task::Classification {
        return cx.drop(region, rule, "S3:knn", "noisy-embedding kNN answers classification calls only");
    }
    if inputs.len() != 1 || outputs.len() != 1 {
        return cx.drop(region, rule, "S3:knn", "noisy-embedding kNN needs a single-argument call");
    }
    let Some(sig) = signature_for(cx.input.catalog, &model.function) else { return };
    let Some(enc) = cx.input.registry.encoders(&sig).first().map(|a| a.id.clone()) else {
        return cx.drop(region, rule, "S3:knn", "no public encoder for the argument type in the registry");
    };
    let Some((TrainingSource::Labelled { relation, inputs: bare, label }, rows)) = labelled_source(cx.input.catalog, &model.function, inputs) else {
        return cx.drop(region, rule, "S3:knn", format!("'{}' has no labelled relation to embed", model.function));
    };
    let child = g.nodes[p].children[0];
    for (i, eps) in cx.targets(region, rule, "S3:knn").into_iter().enumerate() {
        // each record is released twice: once stored, once as a query
        let Some(sigma) = calibrate_noise_multiplier(eps, 2, DEFAULT_DELTA) else { continue };
        let node = NodeKind::NoisyEmbeddingLookup {
            function: model.function.clone(),
            encoder: enc.clone(),
            input: inputs[0].clone(),
            output: outputs[0].clone(),
            relation: relation.clone(),
            source_attribute: bare[0].clone(),
            label_attribute: label.clone(),
            clip_norm: KNN_CLIP_NORM,
            noise_multiplier: sigma,
            k: KNN_K,
            seed: derive_seed(cx.input.seed, (p * 100 + 70 + i) as u64),
            epsilon: eps,
        };
        let spec = RewriteSpec { root: p, region: BTreeSet::from([p]), replacement: vec![(node, vec![ChildRef::Kept(child)])] };
        let expl = format!(
            "S3: classify {} by {KNN_K}-NN over Gaussian-noised {enc} embeddings of {relation}; C_e={KNN_CLIP_NORM}, σ={sigma:.3}, ε={eps}",
            model.function
        );
        cx.push(region, rule, "S3:knn", model.function.clone(), eps, ModelBinding::None, spec, expl, rows);
    }
}

fn attribute_bound(catalog: &Catalog, relation: &str, column: &str) -> Option<f64> {
    let attr = column.rsplit_once('.').map_or(column, |(_, a)| a);
    catalog.relation(relation)?.attribute(attr)?.sum_bound
}

/// Base relation a qualified column comes from.
fn column_relation<'g>(g: &'g IrGraph, column: &str) -> Option<&'g str> {
    let q = column.split_once('.')?.0;
    g.nodes.iter().find_map(|n| match &n.kind {
        NodeKind::Scan { relation, qualifier, columns, .. } if qualifier == q && columns.iter().any(|c| c.name == column) => Some(relation.as_str()),
        _ => None,
    })
}

fn rule_s4(cx: &mut Ctx<'_, '_>, region: &SensitiveRegion) {
    let rule = RuleId::S4OutputPerturbation;
    let g = cx.input.annotated;
    let NodeKind::Aggregate { group_keys, outputs } = &g.nodes[region.root].kind else { return };
    if !group_keys.is_empty() {
        return cx.drop(region, rule, "S4:laplace", "grouped aggregates would release their group keys");
    }
    if outputs.is_empty() {
        return;
    }
    let mut bounds = Vec::new();
    for o in outputs {
        let b = match o.func {
            AggFunc::Count => 1.0,
            AggFunc::Sum | AggFunc::Avg => {
                let c = o.input.as_deref().unwrap_or_default();
                match column_relation(g, c).and_then(|r| attribute_bound(cx.input.catalog, r, c)) {
                    Some(b) if b > 0.0 => b,
                    _ => return cx.drop(region, rule, "S4:laplace", format!("{} has no declared sum_bound (infinite sensitivity)", o.output)),
                }
            }
            AggFunc::None => return,
        };
        bounds.push(b);
    }
    let child = g.nodes[region.root].children[0];
    for (i, eps) in cx.targets(region, rule, "S4:laplace").into_iter().enumerate() {
        let share = eps / outputs.len() as f64;
        let noisy: Vec<NoisyAggSpec> = outputs
            .iter()
            .zip(&bounds)
            .map(|(o, b)| NoisyAggSpec {
                func: o.func,
                input: o.input.clone(),
                output: o.output.clone(),
                output_type: o.output_type,
                bound: *b,
                epsilon: share,
            })
            .collect();
        let node = NodeKind::NoisyAggregate { outputs: noisy, seed: derive_seed(cx.input.seed, (region.root * 100 + 90 + i) as u64) };
        let spec = RewriteSpec { root: region.root, region: BTreeSet::from([region.root]), replacement: vec![(node, vec![ChildRef::Kept(child)])] };
        let names: Vec<&str> = outputs.iter().map(|o| o.output.as_str()).collect();
        let expl = format!("S4: add Laplace noise to {} (sensitivity {:?}), ε={eps}", names.join(", "), bounds);
        let rel = g.relations().join(",");
        cx.push(region, rule, "S4:laplace", format!("aggregate:{rel}"), eps, ModelBinding::None, spec, expl, 0);
    }
}
