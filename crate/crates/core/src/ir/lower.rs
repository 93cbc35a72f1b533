//! AST → IR lowering with predicate pushdown.
//!
//! Shape: per relation `Scan → Select(single-relation conjuncts)`, left-deep
//! joins, `Select(cross-relation conjuncts)`, one `Predict` per distinct model
//! call (each followed by a `Select` on the predictions it enables), then
//! `Aggregate` for aggregate queries or `Project` otherwise.

use std::collections::BTreeSet;

use super::{AggSpec, IrError, IrGraph, ModelRef, NodeId, NodeKind, Predicate, Term};
use crate::catalog::Catalog;
use crate::frontend::{AggFunc, BoundCall, BoundOperand, BoundPredicate, BoundQuery, BoundSelect};
use crate::types::Column;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LoweringError {
    #[error("model call '{function}' expects {expected} argument(s), got {got}")]
    Arity { function: String, expected: usize, got: usize },
    #[error("model call '{function}' argument {index} has type {got}, expected {expected}")]
    ArgumentType { function: String, index: usize, expected: String, got: String },
    #[error("unknown function '{0}'")]
    UnknownFunction(String),
    #[error("unknown relation '{0}'")]
    UnknownRelation(String),
    #[error(transparent)]
    Ir(#[from] IrError),
}

fn term(op: &BoundOperand) -> Term {
    match op {
        BoundOperand::Literal(v) => Term::Literal(v.clone()),
        other => Term::Column(other.column_name().expect("column or call").to_string()),
    }
}

fn to_predicate(p: &BoundPredicate) -> Predicate {
    Predicate { left: term(&p.left), op: p.op, right: term(&p.right) }
}

fn calls_of(p: &BoundPredicate) -> Vec<&str> {
    [&p.left, &p.right]
        .into_iter()
        .filter_map(|o| match o {
            BoundOperand::Call(c) => Some(c.output.as_str()),
            _ => None,
        })
        .collect()
}

fn qualifiers_of(p: &BoundPredicate) -> BTreeSet<&str> {
    [&p.left, &p.right]
        .into_iter()
        .filter_map(|o| match o {
            BoundOperand::Column { name, .. } => name.split('.').next(),
            _ => None,
        })
        .collect()
}

pub fn lower(q: &BoundQuery, catalog: &Catalog) -> Result<IrGraph, LoweringError> {
    let mut g = IrGraph::new();
    let calls = q.calls();
    for c in &calls {
        check_signature(c, catalog)?;
    }
    let (call_preds, plain): (Vec<&BoundPredicate>, Vec<&BoundPredicate>) =
        q.predicates.iter().partition(|p| !calls_of(p).is_empty());

    let mut placed = vec![false; plain.len()];
    let mut subplans: Vec<NodeId> = Vec::new();
    for rel in &q.relations {
        let desc = catalog.relation(&rel.name).ok_or_else(|| LoweringError::UnknownRelation(rel.name.clone()))?;
        let mut node = g.push(
            NodeKind::Scan {
                relation: rel.name.clone(),
                qualifier: rel.qualifier.clone(),
                columns: rel.qualified_columns(),
                row_count: desc.row_count_estimate,
            },
            vec![],
        )?;
        let mut local = Vec::new();
        for (i, p) in plain.iter().enumerate() {
            let qs = qualifiers_of(p);
            if !placed[i] && qs.len() == 1 && qs.contains(rel.qualifier.as_str()) {
                placed[i] = true;
                local.push(to_predicate(p));
            }
        }
        if !local.is_empty() {
            node = g.push(NodeKind::Select { predicates: local }, vec![node])?;
        }
        subplans.push(node);
    }
    let mut cur = subplans[0];
    for (i, (l, r)) in q.joins.iter().enumerate() {
        cur = g.push(NodeKind::Join { left_key: l.clone(), right_key: r.clone() }, vec![cur, subplans[i + 1]])?;
    }
    let rest: Vec<Predicate> =
        plain.iter().zip(&placed).filter(|(_, done)| !**done).map(|(p, _)| to_predicate(p)).collect();
    if !rest.is_empty() {
        cur = g.push(NodeKind::Select { predicates: rest }, vec![cur])?;
    }

    let mut materialized: BTreeSet<&str> = BTreeSet::new();
    let mut call_placed = vec![false; call_preds.len()];
    for c in &calls {
        let sig = catalog.function(&c.function).expect("checked");
        cur = g.push(
            NodeKind::Predict {
                model: ModelRef::original(&c.function),
                task: sig.task,
                inputs: c.args.clone(),
                outputs: vec![Column::new(c.output.clone(), c.output_type)],
                keep_input: true,
            },
            vec![cur],
        )?;
        materialized.insert(c.output.as_str());
        let mut ready = Vec::new();
        for (i, p) in call_preds.iter().enumerate() {
            if !call_placed[i] && calls_of(p).iter().all(|o| materialized.contains(o)) {
                call_placed[i] = true;
                ready.push(to_predicate(p));
            }
        }
        if !ready.is_empty() {
            cur = g.push(NodeKind::Select { predicates: ready }, vec![cur])?;
        }
    }

    let outputs = q.output_columns();
    if q.is_aggregate() {
        let BoundSelect::Items(items) = &q.select else { unreachable!("aggregate queries have items") };
        let specs: Vec<AggSpec> = items
            .iter()
            .filter(|i| i.agg != AggFunc::None)
            .map(|i| AggSpec {
                func: i.agg,
                input: i.arg.as_ref().and_then(|a| a.column_name().map(str::to_string)),
                output: i.output_name.clone(),
                output_type: i.output_type,
            })
            .collect();
        cur = g.push(NodeKind::Aggregate { group_keys: q.group_by.clone(), outputs: specs }, vec![cur])?;
        if g.edges[cur].schema != outputs {
            let attributes = outputs.iter().map(|c| c.name.clone()).collect();
            g.push(NodeKind::Project { attributes }, vec![cur])?;
        }
    } else {
        let attributes = outputs.iter().map(|c| c.name.clone()).collect();
        g.push(NodeKind::Project { attributes }, vec![cur])?;
    }
    Ok(g)
}

fn check_signature(c: &BoundCall, catalog: &Catalog) -> Result<(), LoweringError> {
    let sig = catalog.function(&c.function).ok_or_else(|| LoweringError::UnknownFunction(c.function.clone()))?;
    if sig.input_types.len() != c.args.len() {
        return Err(LoweringError::Arity { function: c.function.clone(), expected: sig.input_types.len(), got: c.args.len() });
    }
    for (i, (want, got)) in sig.input_types.iter().zip(&c.arg_types).enumerate() {
        let compatible = want == got || (want.is_numeric() && got.is_numeric());
        if !compatible {
            return Err(LoweringError::ArgumentType {
                function: c.function.clone(),
                index: i,
                expected: want.to_string(),
                got: got.to_string(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{AttributeDescriptor, FunctionSignature, RelationDescriptor};
    use crate::frontend::compile;
    use crate::types::{DataType, Task};

    fn catalog() -> Catalog {
        let mut c = Catalog::new();
        c.add_relation(RelationDescriptor::new(
            "IMDB_MOVIE_REVIEW",
            vec![
                AttributeDescriptor::new("review_id", DataType::Int64),
                AttributeDescriptor::new("date", DataType::Text),
                AttributeDescriptor::new("Review", DataType::Text),
            ],
            2000,
        ))
        .unwrap();
        c.add_relation(RelationDescriptor::new("T", vec![AttributeDescriptor::new("a", DataType::Int64)], 5)).unwrap();
        c.add_function(FunctionSignature {
            name: "sentiment_classifier".into(),
            input_types: vec![DataType::Text],
            output_type: DataType::Text,
            task: Task::Classification,
            label_attribute: None,
            relation: None,
            output_labels: vec![],
        });
        c
    }

    fn kinds(g: &IrGraph) -> Vec<&'static str> {
        g.nodes.iter().map(|n| n.kind.name()).collect()
    }

    #[test]
    fn imdb_shape() {
        let c = catalog();
        let q = compile("SELECT count(*) FROM IMDB_MOVIE_REVIEW R WHERE R.date > '06/01/2015' AND R.date < '06/05/2015' AND sentiment_classifier(R.Review) = Positive", &c).unwrap();
        let g = lower(&q, &c).unwrap();
        assert_eq!(kinds(&g), ["Scan", "Select", "Predict", "Select", "Aggregate"]);
        g.validate().unwrap();
    }

    #[test]
    fn select_star_shape() {
        let c = catalog();
        let g = lower(&compile("SELECT * FROM T", &c).unwrap(), &c).unwrap();
        assert_eq!(kinds(&g), ["Scan", "Project"]);
        assert_eq!(g.sink_schema(), &[Column::new("T.a", DataType::Int64)]);
    }

    #[test]
    fn arity_mismatch() {
        let c = catalog();
        let q = compile("SELECT sentiment_classifier(R.Review, R.date) FROM IMDB_MOVIE_REVIEW R", &c).unwrap();
        assert!(matches!(lower(&q, &c), Err(LoweringError::Arity { expected: 1, got: 2, .. })));
    }

    #[test]
    fn relowering_is_stable() {
        let c = catalog();
        let q = compile("SELECT a FROM T WHERE a > 1", &c).unwrap();
        assert_eq!(lower(&q, &c).unwrap(), lower(&q, &c).unwrap());
    }
}
