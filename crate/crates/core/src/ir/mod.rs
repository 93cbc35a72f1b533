//! Relational-algebra IR: operators are nodes, datasets are edges.
//!
//! Node ids are assigned in topological order (children before parents), so
//! iterating `nodes` front to back is a valid bottom-up evaluation order. The
//! dataset produced by node `i` is `edges[i]`.

pub mod dot;
pub mod lower;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

pub use dot::to_dot;
pub use lower::{lower, LoweringError};

use crate::frontend::AggFunc;
use crate::types::{CmpOp, Column, DataType, Task, Value};

pub type NodeId = usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Term {
    Column(String),
    Literal(Value),
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Column(c) => f.write_str(c),
            Term::Literal(Value::Text(s)) => write!(f, "'{s}'"),
            Term::Literal(v) => write!(f, "{v}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predicate {
    pub left: Term,
    pub op: CmpOp,
    pub right: Term,
}

impl Predicate {
    pub fn columns(&self) -> Vec<&str> {
        [&self.left, &self.right]
            .into_iter()
            .filter_map(|t| match t {
                Term::Column(c) => Some(c.as_str()),
                Term::Literal(_) => None,
            })
            .collect()
    }

    /// `(column, op, literal)` with the column on the left, if the predicate
    /// has that shape.
    pub fn as_column_literal(&self) -> Option<(&str, CmpOp, &Value)> {
        match (&self.left, &self.right) {
            (Term::Column(c), Term::Literal(v)) => Some((c, self.op, v)),
            (Term::Literal(v), Term::Column(c)) => Some((c, self.op.flip(), v)),
            _ => None,
        }
    }
}

impl fmt::Display for Predicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", self.left, self.op, self.right)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggSpec {
    pub func: AggFunc,
    /// `None` for `COUNT(*)`.
    pub input: Option<String>,
    pub output: String,
    pub output_type: DataType,
}

/// Laplace-perturbed aggregate output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyAggSpec {
    pub func: AggFunc,
    pub input: Option<String>,
    pub output: String,
    pub output_type: DataType,
    /// Clamp bound of the input for SUM/AVG; sensitivity of COUNT is 1.
    pub bound: f64,
    pub epsilon: f64,
}

/// Which model a `Predict` node invokes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    /// Query-level function name the model implements.
    pub function: String,
    /// Registry artifact; `None` means the original (non-private) function.
    pub artifact: Option<String>,
    /// Privacy cost accounted to this node per execution.
    pub epsilon: f64,
}

impl ModelRef {
    pub fn original(function: &str) -> Self {
        ModelRef { function: function.to_string(), artifact: None, epsilon: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NodeKind {
    Scan {
        relation: String,
        qualifier: String,
        /// Qualified columns.
        columns: Vec<Column>,
        row_count: u64,
    },
    Select {
        predicates: Vec<Predicate>,
    },
    Project {
        attributes: Vec<String>,
    },
    Join {
        left_key: String,
        right_key: String,
    },
    Aggregate {
        group_keys: Vec<String>,
        outputs: Vec<AggSpec>,
    },
    /// With `keep_input` the model maps each input row to one output value
    /// appended as a column; otherwise each input row is replaced by the
    /// rows the model returns (rewritten subquery models).
    Predict {
        model: ModelRef,
        task: Task,
        inputs: Vec<String>,
        outputs: Vec<Column>,
        keep_input: bool,
    },
    /// One literal row: the encoded free parameters of a rewritten subquery.
    Constant {
        columns: Vec<Column>,
        row: Vec<Value>,
    },
    NoisyAggregate {
        outputs: Vec<NoisyAggSpec>,
        seed: u64,
    },
    /// Classification by majority vote over the k nearest noisy embeddings
    /// of the labelled records of `relation`.
    NoisyEmbeddingLookup {
        function: String,
        encoder: String,
        input: String,
        output: Column,
        relation: String,
        source_attribute: String,
        label_attribute: String,
        clip_norm: f64,
        noise_multiplier: f64,
        k: usize,
        seed: u64,
        epsilon: f64,
    },
}

impl NodeKind {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Scan { .. } => "Scan",
            NodeKind::Select { .. } => "Select",
            NodeKind::Project { .. } => "Project",
            NodeKind::Join { .. } => "Join",
            NodeKind::Aggregate { .. } => "Aggregate",
            NodeKind::Predict { .. } => "Predict",
            NodeKind::Constant { .. } => "Constant",
            NodeKind::NoisyAggregate { .. } => "NoisyAggregate",
            NodeKind::NoisyEmbeddingLookup { .. } => "NoisyEmbeddingLookup",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            NodeKind::Scan { .. } | NodeKind::Constant { .. } => 0,
            NodeKind::Join { .. } => 2,
            _ => 1,
        }
    }

    /// ε consumed when this node runs.
    pub fn epsilon(&self) -> f64 {
        match self {
            NodeKind::Predict { model, .. } => model.epsilon,
            NodeKind::NoisyAggregate { outputs, .. } => outputs.iter().map(|o| o.epsilon).sum(),
            NodeKind::NoisyEmbeddingLookup { epsilon, .. } => *epsilon,
            _ => 0.0,
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn join<T: fmt::Display>(xs: &[T]) -> String {
            xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
        }
        match self {
            NodeKind::Scan { relation, qualifier, .. } if relation == qualifier => write!(f, "Scan({relation})"),
            NodeKind::Scan { relation, qualifier, .. } => write!(f, "Scan({relation} {qualifier})"),
            NodeKind::Select { predicates } => {
                let ps: Vec<String> = predicates.iter().map(|p| p.to_string()).collect();
                write!(f, "Select({})", ps.join(" AND "))
            }
            NodeKind::Project { attributes } => write!(f, "Project({})", join(attributes)),
            NodeKind::Join { left_key, right_key } => write!(f, "Join({left_key} = {right_key})"),
            NodeKind::Aggregate { group_keys, outputs } => {
                let outs: Vec<&str> = outputs.iter().map(|o| o.output.as_str()).collect();
                if group_keys.is_empty() {
                    write!(f, "Aggregate({})", outs.join(", "))
                } else {
                    write!(f, "Aggregate({}; group by {})", outs.join(", "), join(group_keys))
                }
            }
            NodeKind::Predict { model, inputs, outputs, .. } => {
                let m = match &model.artifact {
                    Some(a) => format!("{}@{a}", model.function),
                    None => model.function.clone(),
                };
                let outs: Vec<&str> = outputs.iter().map(|o| o.name.as_str()).collect();
                write!(f, "Predict({m}; [{}] -> {})", join(inputs), outs.join(", "))
            }
            NodeKind::Constant { columns, row } => {
                let cells: Vec<String> =
                    columns.iter().zip(row).map(|(c, v)| format!("{}={}", c.name, Term::Literal(v.clone()))).collect();
                write!(f, "Constant({})", cells.join(", "))
            }
            NodeKind::NoisyAggregate { outputs, .. } => {
                let outs: Vec<String> = outputs.iter().map(|o| format!("{} eps={}", o.output, o.epsilon)).collect();
                write!(f, "NoisyAggregate({})", outs.join(", "))
            }
            NodeKind::NoisyEmbeddingLookup { function, encoder, input, k, epsilon, .. } => {
                write!(f, "NoisyEmbeddingLookup({function}; {encoder}({input}), k={k}, eps={epsilon})")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IrNode {
    pub id: NodeId,
    pub kind: NodeKind,
    pub children: Vec<NodeId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayloadKind {
    Relation,
    ObjectCollection,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeTaint {
    pub attributes: BTreeSet<String>,
    pub relation_level: bool,
}

impl EdgeTaint {
    pub fn is_tainted(&self) -> bool {
        self.relation_level || !self.attributes.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEdge {
    pub producer: NodeId,
    pub schema: Vec<Column>,
    pub taint: EdgeTaint,
    pub cardinality_estimate: u64,
    pub payload_kind: PayloadKind,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IrError {
    #[error("node {node}: {message}")]
    Malformed { node: NodeId, message: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct IrGraph {
    pub nodes: Vec<IrNode>,
    pub edges: Vec<DatasetEdge>,
}

fn selectivity(p: &Predicate) -> f64 {
    match p.op {
        CmpOp::Eq => 0.1,
        CmpOp::Ne => 0.9,
        _ => 0.5,
    }
}

impl IrGraph {
    pub fn new() -> Self {
        IrGraph::default()
    }

    /// Appends a node whose children already exist and derives its output edge.
    pub fn push(&mut self, kind: NodeKind, children: Vec<NodeId>) -> Result<NodeId, IrError> {
        let id = self.nodes.len();
        if children.len() != kind.arity() || children.iter().any(|c| *c >= id) {
            return Err(IrError::Malformed { node: id, message: format!("bad children {children:?} for {}", kind.name()) });
        }
        let edge = self.derive_edge(id, &kind, &children)?;
        self.nodes.push(IrNode { id, kind, children });
        self.edges.push(edge);
        Ok(id)
    }

    /// The single node nobody consumes.
    pub fn sink(&self) -> NodeId {
        self.nodes.len().saturating_sub(1)
    }

    pub fn node(&self, id: NodeId) -> &IrNode {
        &self.nodes[id]
    }

    pub fn parents(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes.iter().filter(|n| n.children.contains(&id)).map(|n| n.id).collect()
    }

    pub fn parent(&self, id: NodeId) -> Option<NodeId> {
        self.nodes.iter().find(|n| n.children.contains(&id)).map(|n| n.id)
    }

    pub fn sink_schema(&self) -> &[Column] {
        &self.edges[self.sink()].schema
    }

    /// All nodes below (and including) `id`.
    pub fn descendants(&self, id: NodeId) -> BTreeSet<NodeId> {
        let mut out = BTreeSet::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            if out.insert(n) {
                stack.extend(self.nodes[n].children.iter().copied());
            }
        }
        out
    }

    pub fn scans(&self) -> Vec<(NodeId, &str)> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.kind {
                NodeKind::Scan { relation, .. } => Some((n.id, relation.as_str())),
                _ => None,
            })
            .collect()
    }

    /// Base relations read by the plan, deduplicated.
    pub fn relations(&self) -> Vec<String> {
        let mut r: Vec<String> = self.scans().into_iter().map(|(_, r)| r.to_string()).collect();
        r.sort();
        r.dedup();
        r
    }

    pub fn epsilon(&self) -> f64 {
        self.nodes.iter().map(|n| n.kind.epsilon()).sum()
    }

    fn derive_edge(&self, id: NodeId, kind: &NodeKind, children: &[NodeId]) -> Result<DatasetEdge, IrError> {
        let bad = |message: String| IrError::Malformed { node: id, message };
        let child = |i: usize| &self.edges[children[i]];
        let find = |schema: &[Column], name: &str| {
            schema.iter().find(|c| c.name == name).cloned().ok_or_else(|| bad(format!("unknown column '{name}'")))
        };
        let (schema, card) = match kind {
            NodeKind::Scan { columns, row_count, .. } => (columns.clone(), *row_count),
            NodeKind::Select { predicates } => {
                let c = child(0);
                for p in predicates {
                    for col in p.columns() {
                        find(&c.schema, col)?;
                    }
                }
                let s: f64 = predicates.iter().map(selectivity).product();
                (c.schema.clone(), ((c.cardinality_estimate as f64) * s).ceil() as u64)
            }
            NodeKind::Project { attributes } => {
                let c = child(0);
                let schema = attributes.iter().map(|a| find(&c.schema, a)).collect::<Result<Vec<_>, _>>()?;
                (schema, c.cardinality_estimate)
            }
            NodeKind::Join { left_key, right_key } => {
                let (l, r) = (child(0), child(1));
                find(&l.schema, left_key)?;
                find(&r.schema, right_key)?;
                let mut schema = l.schema.clone();
                schema.extend(r.schema.iter().cloned());
                (schema, l.cardinality_estimate.max(r.cardinality_estimate))
            }
            NodeKind::Aggregate { group_keys, outputs } => {
                let c = child(0);
                let mut schema = group_keys.iter().map(|g| find(&c.schema, g)).collect::<Result<Vec<_>, _>>()?;
                for o in outputs {
                    if let Some(i) = &o.input {
                        find(&c.schema, i)?;
                    }
                    schema.push(Column::new(o.output.clone(), o.output_type));
                }
                let card = if group_keys.is_empty() { 1 } else { c.cardinality_estimate.clamp(1, 10) };
                (schema, card)
            }
            NodeKind::NoisyAggregate { outputs, .. } => {
                let c = child(0);
                let mut schema = Vec::new();
                for o in outputs {
                    if let Some(i) = &o.input {
                        find(&c.schema, i)?;
                    }
                    schema.push(Column::new(o.output.clone(), o.output_type));
                }
                (schema, 1)
            }
            NodeKind::Predict { inputs, outputs, keep_input, .. } => {
                let c = child(0);
                for i in inputs {
                    find(&c.schema, i)?;
                }
                if *keep_input {
                    let mut schema = c.schema.clone();
                    schema.extend(outputs.iter().cloned());
                    (schema, c.cardinality_estimate)
                } else {
                    (outputs.clone(), c.cardinality_estimate)
                }
            }
            NodeKind::Constant { columns, row } => {
                if columns.len() != row.len() {
                    return Err(bad("constant arity mismatch".into()));
                }
                (columns.clone(), 1)
            }
            NodeKind::NoisyEmbeddingLookup { input, output, .. } => {
                let c = child(0);
                find(&c.schema, input)?;
                let mut schema = c.schema.clone();
                schema.push(output.clone());
                (schema, c.cardinality_estimate)
            }
        };
        let payload_kind = if schema.iter().any(|c| c.data_type == DataType::Blob) {
            PayloadKind::ObjectCollection
        } else {
            PayloadKind::Relation
        };
        Ok(DatasetEdge { producer: id, schema, taint: EdgeTaint::default(), cardinality_estimate: card, payload_kind })
    }

    /// Structural checks: topological ids, arity, single sink, edge schemas.
    pub fn validate(&self) -> Result<(), IrError> {
        let mut rebuilt = IrGraph::new();
        for n in &self.nodes {
            if n.id != rebuilt.nodes.len() {
                return Err(IrError::Malformed { node: n.id, message: "ids are not dense".into() });
            }
            rebuilt.push(n.kind.clone(), n.children.clone())?;
        }
        let consumed: BTreeSet<NodeId> = self.nodes.iter().flat_map(|n| n.children.iter().copied()).collect();
        let sinks = self.nodes.iter().filter(|n| !consumed.contains(&n.id)).count();
        if sinks != 1 {
            return Err(IrError::Malformed { node: self.sink(), message: format!("{sinks} sinks") });
        }
        for (a, b) in rebuilt.edges.iter().zip(&self.edges) {
            if a.schema != b.schema {
                return Err(IrError::Malformed { node: a.producer, message: "edge schema out of date".into() });
            }
        }
        Ok(())
    }

    /// Copies the graph with the subtree rooted at `root` (restricted to
    /// `region`) replaced by `replacement`, a list of new nodes whose
    /// children index either earlier replacement nodes (`Local`) or kept
    /// nodes of `self` (`Kept`). Node ids are reassigned topologically.
    pub fn splice(&self, root: NodeId, region: &BTreeSet<NodeId>, replacement: Vec<(NodeKind, Vec<ChildRef>)>) -> Result<IrGraph, IrError> {
        self.splice_mapped(root, region, replacement).map(|(g, _)| g)
    }

    /// [`IrGraph::splice`] that also returns where each old node went
    /// (`root` maps to the last replacement node; dropped nodes to `None`).
    pub fn splice_mapped(
        &self,
        root: NodeId,
        region: &BTreeSet<NodeId>,
        replacement: Vec<(NodeKind, Vec<ChildRef>)>,
    ) -> Result<(IrGraph, Vec<Option<NodeId>>), IrError> {
        let mut out = IrGraph::new();
        let mut map: Vec<Option<NodeId>> = vec![None; self.nodes.len()];
        let needed = {
            // nodes reachable from the sink without passing through the region
            let mut keep = BTreeSet::new();
            let mut stack = vec![self.sink()];
            while let Some(n) = stack.pop() {
                if n == root {
                    for (_, children) in &replacement {
                        for c in children {
                            if let ChildRef::Kept(k) = c {
                                stack.push(*k);
                            }
                        }
                    }
                    continue;
                }
                if region.contains(&n) || !keep.insert(n) {
                    continue;
                }
                stack.extend(self.nodes[n].children.iter().copied());
            }
            keep
        };
        let mut replacement_ids = Vec::new();
        let mut root_new = None;
        for n in &self.nodes {
            if n.id == root {
                for (kind, children) in &replacement {
                    let ch = children
                        .iter()
                        .map(|c| match c {
                            ChildRef::Kept(k) => map[*k].ok_or_else(|| IrError::Malformed {
                                node: *k,
                                message: "replacement references a node that is not kept".into(),
                            }),
                            ChildRef::Local(i) => Ok(replacement_ids[*i]),
                        })
                        .collect::<Result<Vec<_>, _>>()?;
                    replacement_ids.push(out.push(kind.clone(), ch)?);
                }
                root_new = replacement_ids.last().copied();
                map[root] = root_new;
                continue;
            }
            if !needed.contains(&n.id) {
                continue;
            }
            let ch = n.children.iter().map(|c| map[*c].expect("children precede parents")).collect();
            map[n.id] = Some(out.push(n.kind.clone(), ch)?);
        }
        if root_new.is_none() {
            return Err(IrError::Malformed { node: root, message: "empty replacement".into() });
        }
        Ok((out, map))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ChildRef {
    Kept(NodeId),
    Local(usize),
}
