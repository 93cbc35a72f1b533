//! Graphviz export.

use std::collections::BTreeSet;
use std::fmt::Write;

use super::{IrGraph, NodeId};

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

/// DOT text with data flowing bottom-up; `highlight`ed nodes are filled green.
pub fn to_dot(ir: &IrGraph, highlight: &BTreeSet<NodeId>) -> String {
    let mut out = String::from("digraph ir {\n  rankdir=BT;\n  node [shape=box, fontname=\"Helvetica\"];\n");
    for n in &ir.nodes {
        let e = &ir.edges[n.id];
        let taint = if e.taint.is_tainted() { " [tainted]" } else { "" };
        let label = format!("#{} {}\\n{} rows{}", n.id, escape(&n.kind.to_string()), e.cardinality_estimate, taint);
        if highlight.contains(&n.id) {
            let _ = writeln!(out, "  n{} [label=\"{label}\", style=filled, fillcolor=palegreen];", n.id);
        } else {
            let _ = writeln!(out, "  n{} [label=\"{label}\"];", n.id);
        }
    }
    for n in &ir.nodes {
        for c in &n.children {
            let _ = writeln!(out, "  n{c} -> n{};", n.id);
        }
    }
    out.push_str("}\n");
    out
}
