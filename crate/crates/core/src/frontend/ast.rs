//! Syntax tree of the query language and its canonical printer.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::types::CmpOp;

/// Source position (1-based). All spans compare equal so that syntax trees
/// parsed from differently formatted text can be compared structurally.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct Span {
    pub line: usize,
    pub column: usize,
}

impl PartialEq for Span {
    fn eq(&self, _: &Span) -> bool {
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AggFunc {
    Count,
    Sum,
    Avg,
    None,
}

impl AggFunc {
    pub fn keyword(self) -> Option<&'static str> {
        match self {
            AggFunc::Count => Some("COUNT"),
            AggFunc::Sum => Some("SUM"),
            AggFunc::Avg => Some("AVG"),
            AggFunc::None => None,
        }
    }

    pub fn from_keyword(s: &str) -> Option<AggFunc> {
        match s.to_ascii_uppercase().as_str() {
            "COUNT" => Some(AggFunc::Count),
            "SUM" => Some(AggFunc::Sum),
            "AVG" => Some(AggFunc::Avg),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryAst {
    pub select: SelectList,
    pub from: RelRef,
    pub joins: Vec<JoinClause>,
    pub where_clause: Vec<Comparison>,
    pub group_by: Vec<AttrRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SelectList {
    All,
    Items(Vec<SelectItem>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectItem {
    pub agg: AggFunc,
    pub expr: SelectExpr,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum SelectExpr {
    /// Only meaningful inside `COUNT(*)`.
    Star,
    Operand(Operand),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelRef {
    pub name: String,
    pub alias: Option<String>,
    pub span: Span,
}

impl RelRef {
    pub fn qualifier(&self) -> &str {
        self.alias.as_deref().unwrap_or(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JoinClause {
    pub relation: RelRef,
    pub left: AttrRef,
    pub right: AttrRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub left: Operand,
    pub op: CmpOp,
    pub right: Operand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Operand {
    /// An attribute reference. An unqualified name that does not resolve to
    /// any attribute is treated as a bare enum token (a string literal) during
    /// binding, e.g. `Positive`.
    Attr(AttrRef),
    Literal(Literal),
    Call(ModelCall),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttrRef {
    pub qualifier: Option<String>,
    pub name: String,
    pub span: Span,
}

impl AttrRef {
    pub fn new(qualifier: Option<&str>, name: &str) -> Self {
        AttrRef { qualifier: qualifier.map(str::to_string), name: name.to_string(), span: Span::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCall {
    pub name: String,
    pub args: Vec<AttrRef>,
    pub span: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Literal {
    Str(String),
    Int(i64),
    Float(f64),
}

impl QueryAst {
    /// Every model call in the query, in select-list then where-clause order.
    pub fn model_calls(&self) -> Vec<&ModelCall> {
        let mut out = Vec::new();
        if let SelectList::Items(items) = &self.select {
            for it in items {
                if let SelectExpr::Operand(Operand::Call(c)) = &it.expr {
                    out.push(c);
                }
            }
        }
        for cmp in &self.where_clause {
            for side in [&cmp.left, &cmp.right] {
                if let Operand::Call(c) = side {
                    out.push(c);
                }
            }
        }
        out
    }

    pub fn is_aggregate(&self) -> bool {
        !self.group_by.is_empty()
            || matches!(&self.select, SelectList::Items(items) if items.iter().any(|i| i.agg != AggFunc::None))
    }
}

impl fmt::Display for AttrRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.qualifier {
            Some(q) => write!(f, "{q}.{}", self.name),
            None => f.write_str(&self.name),
        }
    }
}

impl fmt::Display for ModelCall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}(", self.name)?;
        for (i, a) in self.args.iter().enumerate() {
            if i > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{a}")?;
        }
        f.write_str(")")
    }
}

impl fmt::Display for Literal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Literal::Str(s) => write!(f, "'{}'", s.replace('\'', "''")),
            Literal::Int(i) => write!(f, "{i}"),
            Literal::Float(x) => {
                if x.fract() == 0.0 && x.is_finite() {
                    write!(f, "{x:.1}")
                } else {
                    write!(f, "{x}")
                }
            }
        }
    }
}

impl fmt::Display for Operand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Operand::Attr(a) => write!(f, "{a}"),
            Operand::Literal(l) => write!(f, "{l}"),
            Operand::Call(c) => write!(f, "{c}"),
        }
    }
}

impl fmt::Display for SelectItem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = match &self.expr {
            SelectExpr::Star => "*".to_string(),
            SelectExpr::Operand(o) => o.to_string(),
        };
        match self.agg.keyword() {
            Some(k) => write!(f, "{k}({inner})"),
            None => f.write_str(&inner),
        }
    }
}

impl fmt::Display for RelRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.alias {
            Some(a) => write!(f, "{} {a}", self.name),
            None => f.write_str(&self.name),
        }
    }
}

impl fmt::Display for QueryAst {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SELECT ")?;
        match &self.select {
            SelectList::All => f.write_str("*")?,
            SelectList::Items(items) => {
                for (i, it) in items.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{it}")?;
                }
            }
        }
        write!(f, " FROM {}", self.from)?;
        for j in &self.joins {
            write!(f, " JOIN {} ON {} = {}", j.relation, j.left, j.right)?;
        }
        for (i, c) in self.where_clause.iter().enumerate() {
            f.write_str(if i == 0 { " WHERE " } else { " AND " })?;
            write!(f, "{} {} {}", c.left, c.op, c.right)?;
        }
        for (i, g) in self.group_by.iter().enumerate() {
            f.write_str(if i == 0 { " GROUP BY " } else { ", " })?;
            write!(f, "{g}")?;
        }
        Ok(())
    }
}
