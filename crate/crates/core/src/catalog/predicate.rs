//! Boolean row predicates stored in the catalog (tuple taints, view filters).

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::types::{CmpOp, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RowPredicate {
    Compare { attribute: String, op: CmpOp, value: Value },
    And { children: Vec<RowPredicate> },
    Or { children: Vec<RowPredicate> },
    Not { child: Box<RowPredicate> },
}

impl RowPredicate {
    pub fn compare(attribute: &str, op: CmpOp, value: impl Into<Value>) -> Self {
        RowPredicate::Compare { attribute: attribute.to_string(), op, value: value.into() }
    }

    pub fn negate(self) -> Self {
        match self {
            RowPredicate::Not { child } => *child,
            other => RowPredicate::Not { child: Box::new(other) },
        }
    }

    /// Conjunction; a single child is returned as-is.
    pub fn all(mut children: Vec<RowPredicate>) -> Option<Self> {
        match children.len() {
            0 => None,
            1 => children.pop(),
            _ => Some(RowPredicate::And { children }),
        }
    }

    /// Disjunction with flattened, sorted and de-duplicated children, so that
    /// the union of two predicate sets does not depend on insertion order.
    pub fn any(children: Vec<RowPredicate>) -> Option<Self> {
        let mut flat = Vec::new();
        for c in children {
            match c {
                RowPredicate::Or { children } => flat.extend(children),
                other => flat.push(other),
            }
        }
        let mut keyed: Vec<(String, RowPredicate)> =
            flat.into_iter().map(|p| (serde_json::to_string(&p).unwrap_or_default(), p)).collect();
        keyed.sort_by(|a, b| a.0.cmp(&b.0));
        keyed.dedup_by(|a, b| a.0 == b.0);
        let mut flat: Vec<RowPredicate> = keyed.into_iter().map(|(_, p)| p).collect();
        match flat.len() {
            0 => None,
            1 => flat.pop(),
            _ => Some(RowPredicate::Or { children: flat }),
        }
    }

    pub fn attributes(&self) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        self.collect_attributes(&mut out);
        out
    }

    fn collect_attributes(&self, out: &mut BTreeSet<String>) {
        match self {
            RowPredicate::Compare { attribute, .. } => {
                out.insert(attribute.clone());
            }
            RowPredicate::And { children } | RowPredicate::Or { children } => {
                children.iter().for_each(|c| c.collect_attributes(out))
            }
            RowPredicate::Not { child } => child.collect_attributes(out),
        }
    }

    /// Evaluates the predicate; `lookup` resolves an attribute name to the
    /// row's value. Missing attributes and incomparable values are false.
    pub fn eval<'a>(&self, lookup: &impl Fn(&str) -> Option<&'a Value>) -> bool {
        match self {
            RowPredicate::Compare { attribute, op, value } => {
                lookup(attribute).and_then(|v| op.eval(v, value)).unwrap_or(false)
            }
            RowPredicate::And { children } => children.iter().all(|c| c.eval(lookup)),
            RowPredicate::Or { children } => children.iter().any(|c| c.eval(lookup)),
            RowPredicate::Not { child } => !child.eval(lookup),
        }
    }
}

fn fmt_value(v: &Value, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match v {
        Value::Text(s) => write!(f, "'{}'", s.replace('\'', "''")),
        other => write!(f, "{other}"),
    }
}

impl fmt::Display for RowPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RowPredicate::Compare { attribute, op, value } => {
                write!(f, "{attribute} {op} ")?;
                fmt_value(value, f)
            }
            RowPredicate::And { children } | RowPredicate::Or { children } => {
                let sep = if matches!(self, RowPredicate::And { .. }) { " AND " } else { " OR " };
                for (i, c) in children.iter().enumerate() {
                    if i > 0 {
                        f.write_str(sep)?;
                    }
                    write!(f, "({c})")?;
                }
                Ok(())
            }
            RowPredicate::Not { child } => write!(f, "NOT ({child})"),
        }
    }
}
