//! Semantic analysis: resolves relations, attributes and model calls against
//! the catalog. Columns are named `qualifier.attribute` from here on.

use serde::{Deserialize, Serialize};

use super::ast::*;
use super::FrontendError;
use crate::catalog::Catalog;
use crate::types::{CmpOp, Column, DataType, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundRelation {
    pub name: String,
    pub qualifier: String,
    /// Unqualified attribute names and types, catalog order.
    pub columns: Vec<Column>,
}

impl BoundRelation {
    pub fn qualified(&self, attr: &str) -> String {
        format!("{}.{}", self.qualifier, attr)
    }

    pub fn qualified_columns(&self) -> Vec<Column> {
        self.columns.iter().map(|c| Column::new(self.qualified(&c.name), c.data_type)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCall {
    pub function: String,
    /// Qualified argument columns.
    pub args: Vec<String>,
    pub arg_types: Vec<DataType>,
    /// Name of the column holding the call's result, e.g. `f(R.x)`.
    pub output: String,
    pub output_type: DataType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BoundOperand {
    Column { name: String, data_type: DataType },
    Literal(Value),
    Call(BoundCall),
}

impl BoundOperand {
    pub fn data_type(&self) -> DataType {
        match self {
            BoundOperand::Column { data_type, .. } => *data_type,
            BoundOperand::Literal(v) => v.data_type(),
            BoundOperand::Call(c) => c.output_type,
        }
    }

    /// Column name this operand reads after model calls are materialized.
    pub fn column_name(&self) -> Option<&str> {
        match self {
            BoundOperand::Column { name, .. } => Some(name),
            BoundOperand::Call(c) => Some(&c.output),
            BoundOperand::Literal(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundPredicate {
    pub left: BoundOperand,
    pub op: CmpOp,
    pub right: BoundOperand,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundItem {
    pub agg: AggFunc,
    /// `None` for `COUNT(*)`.
    pub arg: Option<BoundOperand>,
    pub output_name: String,
    pub output_type: DataType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BoundSelect {
    All,
    Items(Vec<BoundItem>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundQuery {
    pub ast: QueryAst,
    /// FROM relation first, then joined relations in order.
    pub relations: Vec<BoundRelation>,
    /// Equi-join keys; `joins[i]` attaches `relations[i + 1]`.
    pub joins: Vec<(String, String)>,
    pub predicates: Vec<BoundPredicate>,
    pub select: BoundSelect,
    pub group_by: Vec<String>,
}

impl BoundQuery {
    pub fn is_aggregate(&self) -> bool {
        self.ast.is_aggregate()
    }

    /// Distinct model calls in first-appearance order (select list, then where).
    pub fn calls(&self) -> Vec<&BoundCall> {
        fn call(op: &BoundOperand) -> Option<&BoundCall> {
            match op {
                BoundOperand::Call(c) => Some(c),
                _ => None,
            }
        }
        let mut out: Vec<&BoundCall> = Vec::new();
        let mut all = Vec::new();
        if let BoundSelect::Items(items) = &self.select {
            all.extend(items.iter().filter_map(|i| i.arg.as_ref()).filter_map(call));
        }
        for p in &self.predicates {
            all.extend([&p.left, &p.right].into_iter().filter_map(call));
        }
        for c in all {
            if !out.iter().any(|o| o.output == c.output) {
                out.push(c);
            }
        }
        out
    }

    /// Every column of the joined input, qualified.
    pub fn input_columns(&self) -> Vec<Column> {
        self.relations.iter().flat_map(|r| r.qualified_columns()).collect()
    }

    pub fn column_type(&self, qualified: &str) -> Option<DataType> {
        self.input_columns().into_iter().find(|c| c.name == qualified).map(|c| c.data_type)
    }

    /// Columns of the final result.
    pub fn output_columns(&self) -> Vec<Column> {
        match &self.select {
            BoundSelect::All => self.input_columns(),
            BoundSelect::Items(items) => items.iter().map(|i| Column::new(i.output_name.clone(), i.output_type)).collect(),
        }
    }
}

struct Binder<'a> {
    catalog: &'a Catalog,
    relations: Vec<BoundRelation>,
}

pub fn bind(ast: QueryAst, catalog: &Catalog) -> Result<BoundQuery, FrontendError> {
    let mut b = Binder { catalog, relations: Vec::new() };
    b.add_relation(&ast.from)?;
    for j in &ast.joins {
        b.add_relation(&j.relation)?;
    }
    let mut joins = Vec::new();
    for (i, j) in ast.joins.iter().enumerate() {
        let (l, lt) = b.resolve(&j.left)?;
        let (r, rt) = b.resolve(&j.right)?;
        let new_q = b.relations[i + 1].qualifier.clone();
        let left_new = l.starts_with(&format!("{new_q}."));
        let right_new = r.starts_with(&format!("{new_q}."));
        let (outer, inner) = match (left_new, right_new) {
            (false, true) => (l, r),
            (true, false) => (r, l),
            _ => {
                return Err(FrontendError::semantic(
                    j.left.span,
                    format!("join condition must relate '{new_q}' to an earlier relation"),
                ))
            }
        };
        let outer_rel = outer.split('.').next().unwrap_or_default();
        if !b.relations[..=i].iter().any(|r| r.qualifier == outer_rel) {
            return Err(FrontendError::semantic(j.left.span, "join condition references a later relation"));
        }
        if lt.is_numeric() != rt.is_numeric() {
            return Err(FrontendError::semantic(j.left.span, format!("join keys have incompatible types {lt} and {rt}")));
        }
        joins.push((outer, inner));
    }
    let mut predicates = Vec::new();
    for c in &ast.where_clause {
        let left = b.operand(&c.left, true)?;
        let right = b.operand(&c.right, true)?;
        if matches!((&left, &right), (BoundOperand::Literal(_), BoundOperand::Literal(_))) {
            return Err(FrontendError::semantic(Span::default(), "comparison between two literals"));
        }
        predicates.push(BoundPredicate { left, op: c.op, right });
    }
    let mut group_by = Vec::new();
    for g in &ast.group_by {
        group_by.push(b.resolve(g)?.0);
    }
    let aggregate = ast.is_aggregate();
    let select = match &ast.select {
        SelectList::All => {
            if aggregate {
                return Err(FrontendError::semantic(ast.from.span, "SELECT * cannot be combined with GROUP BY"));
            }
            BoundSelect::All
        }
        SelectList::Items(items) => {
            let mut out = Vec::new();
            for it in items {
                out.push(b.item(it, aggregate, &group_by)?);
            }
            let mut names: Vec<&str> = out.iter().map(|i: &BoundItem| i.output_name.as_str()).collect();
            names.sort();
            if names.windows(2).any(|w| w[0] == w[1]) {
                return Err(FrontendError::semantic(ast.from.span, "duplicate select item"));
            }
            BoundSelect::Items(out)
        }
    };
    Ok(BoundQuery { relations: b.relations, joins, predicates, select, group_by, ast })
}

impl Binder<'_> {
    fn add_relation(&mut self, r: &RelRef) -> Result<(), FrontendError> {
        let desc = self
            .catalog
            .relation(&r.name)
            .ok_or_else(|| FrontendError::semantic(r.span, format!("unknown relation '{}'", r.name)))?;
        let qualifier = r.qualifier().to_string();
        if self.relations.iter().any(|x| x.qualifier == qualifier) {
            return Err(FrontendError::semantic(r.span, format!("duplicate relation name '{qualifier}'")));
        }
        self.relations.push(BoundRelation { name: desc.name.clone(), qualifier, columns: desc.columns() });
        Ok(())
    }

    fn lookup(&self, a: &AttrRef) -> Result<Option<(String, DataType)>, FrontendError> {
        match &a.qualifier {
            Some(q) => {
                let rel = self
                    .relations
                    .iter()
                    .find(|r| &r.qualifier == q)
                    .ok_or_else(|| FrontendError::semantic(a.span, format!("unknown relation '{q}'")))?;
                let col = rel.columns.iter().find(|c| c.name == a.name).ok_or_else(|| {
                    FrontendError::semantic(a.span, format!("unknown attribute '{}' in '{}'", a.name, rel.name))
                })?;
                Ok(Some((rel.qualified(&col.name), col.data_type)))
            }
            None => {
                let hits: Vec<(String, DataType)> = self
                    .relations
                    .iter()
                    .filter_map(|r| r.columns.iter().find(|c| c.name == a.name).map(|c| (r.qualified(&c.name), c.data_type)))
                    .collect();
                match hits.len() {
                    0 => Ok(None),
                    1 => Ok(hits.into_iter().next()),
                    _ => Err(FrontendError::semantic(a.span, format!("ambiguous attribute '{}'", a.name))),
                }
            }
        }
    }

    fn resolve(&self, a: &AttrRef) -> Result<(String, DataType), FrontendError> {
        self.lookup(a)?.ok_or_else(|| FrontendError::semantic(a.span, format!("unknown attribute '{}'", a.name)))
    }

    fn operand(&self, op: &Operand, bare_tokens: bool) -> Result<BoundOperand, FrontendError> {
        Ok(match op {
            Operand::Attr(a) => match self.lookup(a)? {
                Some((name, data_type)) => BoundOperand::Column { name, data_type },
                None if bare_tokens && a.qualifier.is_none() => BoundOperand::Literal(Value::Text(a.name.clone())),
                None => return Err(FrontendError::semantic(a.span, format!("unknown attribute '{}'", a.name))),
            },
            Operand::Literal(l) => BoundOperand::Literal(match l {
                Literal::Str(s) => Value::Text(s.clone()),
                Literal::Int(i) => Value::Int(*i),
                Literal::Float(x) => Value::Float(*x),
            }),
            Operand::Call(c) => {
                let f = self
                    .catalog
                    .function(&c.name)
                    .ok_or_else(|| FrontendError::semantic(c.span, format!("unknown function '{}'", c.name)))?;
                let mut args = Vec::new();
                let mut arg_types = Vec::new();
                for a in &c.args {
                    let (n, t) = self.resolve(a)?;
                    args.push(n);
                    arg_types.push(t);
                }
                let output = format!("{}({})", c.name, args.join(", "));
                BoundOperand::Call(BoundCall { function: c.name.clone(), args, arg_types, output, output_type: f.output_type })
            }
        })
    }

    fn item(&self, it: &SelectItem, aggregate: bool, group_by: &[String]) -> Result<BoundItem, FrontendError> {
        let arg = match &it.expr {
            SelectExpr::Star => {
                if it.agg != AggFunc::Count {
                    return Err(FrontendError::semantic(Span::default(), "'*' is only allowed inside COUNT"));
                }
                None
            }
            SelectExpr::Operand(Operand::Literal(l)) => {
                return Err(FrontendError::semantic(Span::default(), format!("literal {l} in select list")))
            }
            SelectExpr::Operand(op) => Some(self.operand(op, false)?),
        };
        let arg_name = arg.as_ref().and_then(|a| a.column_name().map(str::to_string));
        let (output_name, output_type) = match it.agg {
            AggFunc::None => {
                let name = arg_name.expect("non-literal operand");
                if aggregate && !group_by.contains(&name) {
                    return Err(FrontendError::semantic(
                        Span::default(),
                        format!("'{name}' must appear in GROUP BY or inside an aggregate"),
                    ));
                }
                (name, arg.as_ref().expect("operand").data_type())
            }
            AggFunc::Count => (format!("count({})", arg_name.as_deref().unwrap_or("*")), DataType::Int64),
            AggFunc::Sum | AggFunc::Avg => {
                let a = arg.as_ref().expect("operand");
                if !a.data_type().is_numeric() {
                    return Err(FrontendError::semantic(
                        Span::default(),
                        format!("{} needs a numeric argument", it.agg.keyword().unwrap_or_default()),
                    ));
                }
                let kw = if it.agg == AggFunc::Sum { "sum" } else { "avg" };
                let t = if it.agg == AggFunc::Sum && a.data_type() == DataType::Int64 {
                    DataType::Int64
                } else {
                    DataType::Float64
                };
                (format!("{kw}({})", arg_name.expect("operand")), t)
            }
        };
        Ok(BoundItem { agg: it.agg, arg, output_name, output_type })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{AttributeDescriptor, FunctionSignature, RelationDescriptor};
    use crate::frontend::parse;
    use crate::types::Task;

    fn catalog() -> Catalog {
        let mut c = Catalog::new();
        c.add_relation(RelationDescriptor::new(
            "IMDB_MOVIE_REVIEW",
            vec![
                AttributeDescriptor::new("review_id", DataType::Int64),
                AttributeDescriptor::new("date", DataType::Text),
                AttributeDescriptor::new("Review", DataType::Text),
            ],
            10,
        ))
        .unwrap();
        c.add_function(FunctionSignature {
            name: "sentiment_classifier".into(),
            input_types: vec![DataType::Text],
            output_type: DataType::Text,
            task: Task::Classification,
            label_attribute: None,
            relation: None,
            output_labels: vec!["Negative".into(), "Positive".into()],
        });
        c
    }

    #[test]
    fn bare_enum_token_becomes_text() {
        let q = parse("SELECT count(*) FROM IMDB_MOVIE_REVIEW R WHERE sentiment_classifier(R.Review) = Positive").unwrap();
        let b = bind(q, &catalog()).unwrap();
        assert_eq!(b.predicates[0].right, BoundOperand::Literal(Value::text("Positive")));
        assert_eq!(b.calls()[0].output, "sentiment_classifier(R.Review)");
        assert_eq!(b.output_columns(), vec![Column::new("count(*)", DataType::Int64)]);
    }

    #[test]
    fn unknown_names() {
        let c = catalog();
        for sql in [
            "SELECT * FROM Nope",
            "SELECT X.date FROM IMDB_MOVIE_REVIEW R",
            "SELECT R.zzz FROM IMDB_MOVIE_REVIEW R",
            "SELECT zzz FROM IMDB_MOVIE_REVIEW",
            "SELECT * FROM IMDB_MOVIE_REVIEW WHERE nope(Review) = 1",
            "SELECT sum(date) FROM IMDB_MOVIE_REVIEW",
            "SELECT date, count(*) FROM IMDB_MOVIE_REVIEW",
        ] {
            let err = bind(parse(sql).unwrap(), &c).unwrap_err();
            assert!(matches!(err, FrontendError::Semantic { .. }), "{sql}");
        }
    }

    #[test]
    fn group_by_binds() {
        let b = bind(parse("SELECT date, count(*) FROM IMDB_MOVIE_REVIEW GROUP BY date").unwrap(), &catalog()).unwrap();
        assert_eq!(b.group_by, vec!["IMDB_MOVIE_REVIEW.date".to_string()]);
    }
}
