//! Static taint propagation over the IR and sensitive-region discovery.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, TaintSet};
use crate::exec::table::TableSet;
use crate::ir::{EdgeTaint, IrGraph, NodeId, NodeKind, Term};
use crate::types::Value;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaintError {
    #[error("unknown relation '{0}'")]
    UnknownRelation(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitiveRegion {
    pub root: NodeId,
    pub member_nodes: BTreeSet<NodeId>,
    pub tainted_inputs: BTreeSet<String>,
    pub reason: String,
    /// Whether a rewrite rule can anchor at `root`.
    pub anchored: bool,
}

/// Annotates every edge of `ir` with the taint seen by `role`.
///
/// Tuple-level taints are resolved against `tables` when given: a scan is
/// fully tainted only if some row under the tuple predicate also passes the
/// selection pushed onto that scan. Without data the scan is tainted whenever
/// a tuple predicate exists.
pub fn propagate(ir: &IrGraph, catalog: &Catalog, role: &str, tables: Option<&TableSet>) -> Result<IrGraph, TaintError> {
    let taints = catalog.role_taints(role);
    for (_, rel) in ir.scans() {
        if catalog.relation(rel).is_none() {
            return Err(TaintError::UnknownRelation(rel.to_string()));
        }
    }
    Ok(propagate_with(ir, &taints, tables))
}

pub fn propagate_with(ir: &IrGraph, taints: &TaintSet, tables: Option<&TableSet>) -> IrGraph {
    propagate_sanitized(ir, taints, tables, &BTreeSet::new())
}

/// Like [`propagate_with`], treating the nodes in `sanitized` as already
/// protected: they emit untainted results for what they compute.
pub fn propagate_sanitized(ir: &IrGraph, taints: &TaintSet, tables: Option<&TableSet>, sanitized: &BTreeSet<NodeId>) -> IrGraph {
    let mut out = ir.clone();
    for n in &ir.nodes {
        let NodeKind::Scan { relation, qualifier, columns, .. } = &n.kind else { continue };
        let Some(t) = taints.get(relation) else {
            out.edges[n.id].taint = EdgeTaint::default();
            continue;
        };
        let mut attributes: BTreeSet<String> = t.attributes.iter().map(|a| format!("{qualifier}.{a}")).collect();
        if let Some(pred) = &t.tuple_predicate {
            if tuple_touched(ir, n.id, relation, qualifier, pred, tables) {
                attributes.extend(columns.iter().map(|c| c.name.clone()));
            }
        }
        out.edges[n.id].taint = EdgeTaint { attributes, relation_level: false };
    }
    flow(&mut out, sanitized);
    out
}

fn tuple_touched(
    ir: &IrGraph,
    scan: NodeId,
    relation: &str,
    qualifier: &str,
    pred: &crate::catalog::RowPredicate,
    tables: Option<&TableSet>,
) -> bool {
    let Some(table) = tables.and_then(|t| t.peek(relation)) else { return true };
    let pushed: Vec<(String, crate::types::CmpOp, Value)> = match ir.parent(scan).map(|p| &ir.node(p).kind) {
        Some(NodeKind::Select { predicates }) => predicates
            .iter()
            .filter_map(|p| p.as_column_literal())
            .filter_map(|(c, op, v)| c.strip_prefix(&format!("{qualifier}.")).map(|a| (a.to_string(), op, v.clone())))
            .collect(),
        _ => Vec::new(),
    };
    table.rows.iter().any(|row| {
        let lookup = |name: &str| table.column_index(name).map(|i| &row[i]);
        pred.eval(&lookup)
            && pushed.iter().all(|(a, op, v)| lookup(a).and_then(|x| op.eval(x, v)).unwrap_or(false))
    })
}

/// Recomputes the taint of every non-scan edge from the scan edges.
/// Nodes in `sanitized` emit untainted results for what they compute.
fn flow(g: &mut IrGraph, sanitized: &BTreeSet<NodeId>) {
    for id in 0..g.nodes.len() {
        let node = g.nodes[id].clone();
        let input = |i: usize| g.edges[node.children[i]].taint.clone();
        let schema: BTreeSet<String> = g.edges[id].schema.iter().map(|c| c.name.clone()).collect();
        let clean = sanitized.contains(&id);
        let t = match &node.kind {
            NodeKind::Scan { .. } => continue,
            NodeKind::Constant { .. } => EdgeTaint::default(),
            NodeKind::Select { predicates } => {
                let mut t = input(0);
                let reads_tainted = predicates.iter().flat_map(|p| [&p.left, &p.right]).any(|term| match term {
                    Term::Column(c) => t.attributes.contains(c),
                    Term::Literal(_) => false,
                });
                t.relation_level |= reads_tainted;
                if clean {
                    t.relation_level = false;
                }
                t
            }
            NodeKind::Project { .. } => {
                let mut t = input(0);
                t.attributes.retain(|a| schema.contains(a));
                if clean {
                    t = EdgeTaint::default();
                }
                t
            }
            NodeKind::Join { left_key, right_key } => {
                let (l, r) = (input(0), input(1));
                let mut t = EdgeTaint {
                    attributes: l.attributes.union(&r.attributes).cloned().collect(),
                    relation_level: l.relation_level || r.relation_level,
                };
                t.relation_level |= t.attributes.contains(left_key) || t.attributes.contains(right_key);
                t
            }
            NodeKind::Aggregate { group_keys, outputs } => {
                // tainted when the row set is, or when it reads a tainted column
                let i = input(0);
                let reads = group_keys.iter().chain(outputs.iter().filter_map(|o| o.input.as_ref())).any(|c| i.attributes.contains(c));
                if (i.relation_level || reads) && !clean {
                    EdgeTaint { attributes: schema.clone(), relation_level: i.relation_level }
                } else {
                    EdgeTaint::default()
                }
            }
            NodeKind::NoisyAggregate { .. } => EdgeTaint::default(),
            NodeKind::Predict { model, inputs, outputs, keep_input, .. } => {
                let i = input(0);
                let private = model.artifact.is_some() && model.epsilon > 0.0;
                let out_tainted =
                    !clean && !private && (i.relation_level || inputs.iter().any(|a| i.attributes.contains(a)));
                let mut t = if *keep_input { i.clone() } else { EdgeTaint { attributes: BTreeSet::new(), relation_level: i.relation_level } };
                if out_tainted {
                    t.attributes.extend(outputs.iter().map(|c| c.name.clone()));
                }
                if clean || (!*keep_input && private) {
                    t.relation_level = false;
                }
                t
            }
            NodeKind::NoisyEmbeddingLookup { .. } => {
                let mut t = input(0);
                if clean {
                    t.relation_level = false;
                }
                t
            }
        };
        g.edges[id].taint = t;
    }
}

fn is_member(g: &IrGraph, live: &BTreeSet<NodeId>, id: NodeId) -> bool {
    !matches!(g.nodes[id].kind, NodeKind::Scan { .. } | NodeKind::Constant { .. }) && live.contains(&id)
}

/// Nodes joined to the sink by a path of tainted edges. Taint that a
/// projection drops on the way up never reaches the result.
fn reaching_sink(g: &IrGraph) -> BTreeSet<NodeId> {
    let mut live = BTreeSet::new();
    let mut stack = vec![g.sink()];
    while let Some(n) = stack.pop() {
        if g.edges[n].taint.is_tainted() && live.insert(n) {
            stack.extend(g.nodes[n].children.iter().copied());
        }
    }
    live
}

/// Whether the chain below `id` is Select/Predict nodes over one Scan with
/// at most one Predict.
fn single_relation_chain(g: &IrGraph, id: NodeId) -> bool {
    let mut predicts = 0;
    let mut cur = g.nodes[id].children.first().copied();
    while let Some(c) = cur {
        match &g.nodes[c].kind {
            NodeKind::Scan { .. } => return predicts <= 1,
            NodeKind::Select { .. } => {}
            NodeKind::Predict { keep_input: true, .. } => predicts += 1,
            _ => return false,
        }
        cur = g.nodes[c].children.first().copied();
    }
    false
}

fn is_anchor(g: &IrGraph, id: NodeId) -> bool {
    match &g.nodes[id].kind {
        NodeKind::Predict { keep_input: true, model, .. } => model.artifact.is_none(),
        NodeKind::Aggregate { .. } => true,
        NodeKind::Project { .. } => single_relation_chain(g, id),
        _ => false,
    }
}

/// Splits the tainted part of an annotated IR into regions, each rooted
/// at the highest operator where a rewrite can apply. Aggregate-rooted
/// regions absorb every tainted operator below them; Predict-rooted regions
/// absorb the selections and projections directly beneath. Tainted
/// operators that no rewrite covers form unanchored regions.
pub fn find_sensitive_regions(annotated: &IrGraph) -> Vec<SensitiveRegion> {
    let mut g = annotated.clone();
    let mut sanitized = BTreeSet::new();
    let mut covered: BTreeSet<NodeId> = BTreeSet::new();
    let mut regions = Vec::new();
    loop {
        let live = reaching_sink(&g);
        let next = (0..g.nodes.len()).rev().find(|&id| !covered.contains(&id) && is_member(&g, &live, id) && is_anchor(&g, id));
        let Some(root) = next else { break };
        let mut members = BTreeSet::from([root]);
        let mut stack: Vec<NodeId> = g.nodes[root].children.clone();
        let absorbs_all = !matches!(g.nodes[root].kind, NodeKind::Predict { .. });
        while let Some(n) = stack.pop() {
            if covered.contains(&n) || members.contains(&n) || !is_member(&g, &live, n) {
                continue;
            }
            let passes = absorbs_all || matches!(g.nodes[n].kind, NodeKind::Select { .. } | NodeKind::Project { .. });
            if !passes {
                continue;
            }
            members.insert(n);
            stack.extend(g.nodes[n].children.iter().copied());
        }
        covered.extend(members.iter().copied());
        sanitized.insert(root);
        regions.push(make_region(&g, root, members, true));
        flow(&mut g, &sanitized);
    }
    // leftovers: connected components of still-tainted, uncovered operators
    let live = reaching_sink(&g);
    let mut left: BTreeSet<NodeId> = (0..g.nodes.len()).filter(|&id| !covered.contains(&id) && is_member(&g, &live, id)).collect();
    while let Some(&root) = left.iter().next_back() {
        let mut members = BTreeSet::new();
        let mut stack = vec![root];
        while let Some(n) = stack.pop() {
            if !left.remove(&n) {
                continue;
            }
            members.insert(n);
            stack.extend(g.nodes[n].children.iter().copied());
            stack.extend(g.parents(n));
        }
        let top = *members.iter().next_back().expect("nonempty");
        regions.push(make_region(&g, top, members, false));
    }
    regions.sort_by_key(|r| r.root);
    regions
}

fn make_region(g: &IrGraph, root: NodeId, members: BTreeSet<NodeId>, anchored: bool) -> SensitiveRegion {
    let mut tainted_inputs = BTreeSet::new();
    let mut sources: BTreeMap<NodeId, BTreeSet<String>> = BTreeMap::new();
    for &m in &members {
        for &c in &g.nodes[m].children {
            if !members.contains(&c) {
                let t = &g.edges[c].taint;
                tainted_inputs.extend(t.attributes.iter().cloned());
                sources.entry(c).or_default().extend(t.attributes.iter().cloned());
            }
        }
    }
    let src: Vec<String> = sources
        .iter()
        .filter(|(_, a)| !a.is_empty())
        .map(|(id, a)| format!("{} from {} #{id}", a.iter().cloned().collect::<Vec<_>>().join(", "), g.nodes[*id].kind.name()))
        .collect();
    let path: Vec<String> = members.iter().map(|m| format!("{} #{m}", g.nodes[*m].kind.name())).collect();
    let reason = format!("{}; flows through {}", if src.is_empty() { "implicit flow".to_string() } else { src.join("; ") }, path.join(" -> "));
    SensitiveRegion { root, member_nodes: members, tainted_inputs, reason, anchored }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{AttributeDescriptor, FunctionSignature, RelationDescriptor};
    use crate::frontend::compile;
    use crate::ir::lower;
    use crate::types::{DataType, Task};

    fn catalog(tainted: &[&str]) -> Catalog {
        let mut attrs = vec![
            AttributeDescriptor::new("id", DataType::Int64),
            AttributeDescriptor::new("a", DataType::Text),
            AttributeDescriptor::new("b", DataType::Text),
            AttributeDescriptor::new("d", DataType::Text),
        ];
        for a in attrs.iter_mut() {
            a.tainted = tainted.contains(&a.name.as_str());
        }
        let mut c = Catalog::new();
        c.add_relation(RelationDescriptor::new("R", attrs, 100)).unwrap();
        for f in ["f", "g"] {
            c.add_function(FunctionSignature {
                name: f.into(),
                input_types: vec![DataType::Text],
                output_type: DataType::Text,
                task: Task::Classification,
                label_attribute: None,
                relation: None,
                output_labels: vec![],
            });
        }
        c.add_role("analyst");
        c
    }

    fn analyze(sql: &str, tainted: &[&str]) -> (IrGraph, Vec<SensitiveRegion>) {
        let c = catalog(tainted);
        let g = lower(&compile(sql, &c).unwrap(), &c).unwrap();
        let a = propagate(&g, &c, "analyst", None).unwrap();
        let r = find_sensitive_regions(&a);
        (a, r)
    }

    #[test]
    fn aggregate_region_absorbs_everything() {
        let (_, r) = analyze("SELECT count(*) FROM R WHERE R.d > 'x' AND f(R.a) = Positive", &["a"]);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].root, 4);
        assert_eq!(r[0].member_nodes, BTreeSet::from([1, 2, 3, 4]));
    }

    #[test]
    fn untainted_has_no_regions() {
        let (a, r) = analyze("SELECT count(*) FROM R WHERE f(R.a) = Positive", &[]);
        assert!(r.is_empty());
        assert!(a.edges.iter().all(|e| !e.taint.is_tainted()));
    }

    #[test]
    fn projection_drops_taint() {
        let (a, r) = analyze("SELECT R.d FROM R", &["a"]);
        assert!(!a.edges[a.sink()].taint.is_tainted());
        assert!(r.is_empty());
    }

    #[test]
    fn independent_predicts_split() {
        let (_, r) = analyze("SELECT f(R.a), g(R.b) FROM R", &["a", "b"]);
        assert_eq!(r.len(), 2);
        assert!(r.iter().all(|x| x.anchored && x.member_nodes.len() == 1));
    }

    #[test]
    fn implicit_flow_taints_relation() {
        let (a, r) = analyze("SELECT R.d FROM R WHERE R.a = 'x'", &["a"]);
        assert!(a.edges[a.sink()].taint.relation_level);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].member_nodes, BTreeSet::from([1, 2]));
    }
}
