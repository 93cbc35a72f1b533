//! Naive nested-loop evaluation of a bound query: the ground truth the IR
//! interpreter is tested against. Shares no code with `eval`.

use std::collections::BTreeMap;

use super::eval::{ExecError, FunctionModels};
use super::table::{Table, TableSet};
use crate::frontend::{AggFunc, BoundItem, BoundOperand, BoundQuery, BoundSelect};
use crate::types::{CmpOp, Column, DataType, Value, ValueKey};

struct Env<'a> {
    names: &'a [Column],
    functions: &'a FunctionModels,
}

impl Env<'_> {
    fn get(&self, row: &[Value], name: &str) -> Result<Value, ExecError> {
        let i = self.names.iter().position(|c| c.name == name).ok_or_else(|| ExecError::TypeError(format!("no column '{name}'")))?;
        Ok(row[i].clone())
    }

    fn operand(&self, row: &[Value], op: &BoundOperand) -> Result<Value, ExecError> {
        match op {
            BoundOperand::Column { name, .. } => self.get(row, name),
            BoundOperand::Literal(v) => Ok(v.clone()),
            BoundOperand::Call(c) => {
                let f = self.functions.get(&c.function).ok_or_else(|| ExecError::ModelMissing(c.function.clone()))?;
                let args = c.args.iter().map(|a| self.get(row, a)).collect::<Result<Vec<_>, _>>()?;
                let out = f.predict(&args)?;
                let v = out.into_iter().next().and_then(|r| r.into_iter().next());
                let v = v.ok_or_else(|| ExecError::TypeError(format!("{} returned nothing", c.function)))?;
                Ok(match (v, c.output_type) {
                    (Value::Int(i), DataType::Float64) => Value::Float(i as f64),
                    (Value::Int(i), DataType::Text) => Value::Text(i.to_string()),
                    (v, _) => v,
                })
            }
        }
    }
}

pub fn reference_eval(q: &BoundQuery, tables: &TableSet, functions: &FunctionModels) -> Result<Table, ExecError> {
    // cross product of all relations, keeping pairs that satisfy each join
    let mut columns: Vec<Column> = Vec::new();
    let mut rows: Vec<Vec<Value>> = vec![vec![]];
    for (i, rel) in q.relations.iter().enumerate() {
        let t = tables.peek(&rel.name).ok_or_else(|| ExecError::UnknownTable(rel.name.clone()))?;
        let picks: Vec<usize> = rel
            .columns
            .iter()
            .map(|c| t.column_index(&c.name).ok_or_else(|| ExecError::TypeError(format!("table '{}' lacks '{}'", rel.name, c.name))))
            .collect::<Result<_, _>>()?;
        columns.extend(rel.qualified_columns());
        let mut next = Vec::new();
        for left in &rows {
            for right in &t.rows {
                let mut row = left.clone();
                row.extend(picks.iter().map(|&p| right[p].clone()));
                next.push(row);
            }
        }
        if i > 0 {
            let (a, b) = &q.joins[i - 1];
            let ia = columns.iter().position(|c| &c.name == a).expect("bound");
            let ib = columns.iter().position(|c| &c.name == b).expect("bound");
            next.retain(|r| CmpOp::Eq.eval(&r[ia], &r[ib]) == Some(true));
        }
        rows = next;
    }
    let env = Env { names: &columns, functions };
    let mut kept = Vec::new();
    for r in rows {
        let mut ok = true;
        for p in &q.predicates {
            let l = env.operand(&r, &p.left)?;
            let rv = env.operand(&r, &p.right)?;
            if p.op.eval(&l, &rv) != Some(true) {
                ok = false;
                break;
            }
        }
        if ok {
            kept.push(r);
        }
    }
    let out_cols = q.output_columns();
    if !q.is_aggregate() {
        let mut t = Table::new(out_cols);
        for r in &kept {
            let row = match &q.select {
                BoundSelect::All => r.clone(),
                BoundSelect::Items(items) => {
                    items.iter().map(|it| env.operand(r, it.arg.as_ref().expect("plain item"))).collect::<Result<_, _>>()?
                }
            };
            t.rows.push(row);
        }
        return Ok(t);
    }
    let BoundSelect::Items(items) = &q.select else { return Err(ExecError::TypeError("SELECT * in aggregate".into())) };
    let mut groups: Vec<(Vec<ValueKey>, Vec<&Vec<Value>>)> = Vec::new();
    for r in &kept {
        let k = q.group_by.iter().map(|g| env.get(r, g).map(|v| v.key())).collect::<Result<Vec<_>, _>>()?;
        match groups.iter_mut().find(|(gk, _)| *gk == k) {
            Some((_, m)) => m.push(r),
            None => groups.push((k, vec![r])),
        }
    }
    if q.group_by.is_empty() && groups.is_empty() {
        groups.push((vec![], vec![]));
    }
    let mut t = Table::new(out_cols);
    for (_, members) in &groups {
        let mut row = Vec::new();
        for it in items {
            row.push(item_value(&env, it, members)?);
        }
        t.rows.push(row);
    }
    Ok(t)
}

fn item_value(env: &Env<'_>, it: &BoundItem, members: &[&Vec<Value>]) -> Result<Value, ExecError> {
    let vals = |members: &[&Vec<Value>]| -> Result<Vec<Value>, ExecError> {
        members.iter().map(|r| env.operand(r, it.arg.as_ref().expect("argument"))).collect()
    };
    Ok(match it.agg {
        AggFunc::None => env.operand(members[0], it.arg.as_ref().expect("plain item"))?,
        AggFunc::Count => Value::Int(members.len() as i64),
        AggFunc::Sum if it.output_type == DataType::Int64 => {
            let mut s = 0i64;
            for v in vals(members)? {
                if let Value::Int(i) = v {
                    s = s.saturating_add(i);
                }
            }
            Value::Int(s)
        }
        AggFunc::Sum | AggFunc::Avg => {
            let mut xs: Vec<f64> = vals(members)?.iter().map(|v| v.as_f64().unwrap_or(0.0)).collect();
            xs.sort_by(f64::total_cmp);
            let s: f64 = xs.iter().sum();
            match (it.agg, members.len()) {
                (AggFunc::Sum, _) => Value::Float(s),
                (_, 0) => Value::Float(0.0),
                (_, n) => Value::Float(s / n as f64),
            }
        }
    })
}

/// Groups rows by their full value; handy for comparing bags.
pub fn bag(t: &Table) -> BTreeMap<Vec<ValueKey>, usize> {
    let mut m = BTreeMap::new();
    for r in &t.rows {
        *m.entry(r.iter().map(Value::key).collect()).or_insert(0) += 1;
    }
    m
}
