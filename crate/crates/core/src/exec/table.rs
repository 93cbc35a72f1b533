//! In-memory tables and their CSV / JSONL loaders.

use std::collections::BTreeMap;
use std::io::{BufRead, Read, Write};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::types::{Column, DataType, Value};

#[derive(Debug, thiserror::Error)]
pub enum TableError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error on line {line}: {source}")]
    Json { line: usize, source: serde_json::Error },
    #[error("column '{0}' missing from input")]
    MissingColumn(String),
    #[error("row {row}: cannot read '{text}' as {data_type}")]
    BadValue { row: usize, text: String, data_type: DataType },
    #[error("row arity {got} does not match schema arity {expected}")]
    Arity { got: usize, expected: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<Column>,
    pub rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(columns: Vec<Column>) -> Self {
        Table { columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Value>) -> Result<(), TableError> {
        if row.len() != self.columns.len() {
            return Err(TableError::Arity { got: row.len(), expected: self.columns.len() });
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == name)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows sorted by the total value order; used to compare bags.
    pub fn canonical_rows(&self) -> Vec<Vec<Value>> {
        let mut rows = self.rows.clone();
        rows.sort_by(|a, b| {
            a.iter().zip(b.iter()).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
        });
        rows
    }

    pub fn read_csv(reader: impl Read, schema: &[Column]) -> Result<Table, TableError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let idx: Vec<usize> = schema
            .iter()
            .map(|c| headers.iter().position(|h| h == c.name).ok_or_else(|| TableError::MissingColumn(c.name.clone())))
            .collect::<Result<_, _>>()?;
        let mut t = Table::new(schema.to_vec());
        for (row_no, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let row = schema
                .iter()
                .zip(&idx)
                .map(|(c, &i)| parse_cell(rec.get(i).unwrap_or(""), c.data_type, row_no))
                .collect::<Result<Vec<_>, _>>()?;
            t.rows.push(row);
        }
        Ok(t)
    }

    /// One JSON object per line; blob cells are hex strings.
    pub fn read_jsonl(reader: impl BufRead, schema: &[Column]) -> Result<Table, TableError> {
        let mut t = Table::new(schema.to_vec());
        for (line_no, line) in reader.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let obj: serde_json::Map<String, serde_json::Value> =
                serde_json::from_str(&line).map_err(|source| TableError::Json { line: line_no + 1, source })?;
            let mut row = Vec::with_capacity(schema.len());
            for c in schema {
                let v = obj.get(&c.name).ok_or_else(|| TableError::MissingColumn(c.name.clone()))?;
                let text = match v {
                    serde_json::Value::String(s) => s.clone(),
                    other => other.to_string(),
                };
                row.push(parse_cell(&text, c.data_type, line_no)?);
            }
            t.rows.push(row);
        }
        Ok(t)
    }

    pub fn write_csv(&self, writer: impl Write) -> Result<(), TableError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.columns.iter().map(|c| c.name.as_str()))?;
        for row in &self.rows {
            w.write_record(row.iter().map(cell_text))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<(), TableError> {
        for row in &self.rows {
            let obj: serde_json::Map<String, serde_json::Value> = self
                .columns
                .iter()
                .zip(row)
                .map(|(c, v)| {
                    let j = match v {
                        Value::Int(i) => serde_json::Value::from(*i),
                        Value::Float(x) => serde_json::Value::from(*x),
                        other => serde_json::Value::String(cell_text(other)),
                    };
                    (c.name.clone(), j)
                })
                .collect();
            writeln!(writer, "{}", serde_json::Value::Object(obj))?;
        }
        Ok(())
    }

    /// Canonical CSV bytes, the input of dataset fingerprints.
    pub fn csv_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        buf
    }
}

pub fn cell_text(v: &Value) -> String {
    match v {
        Value::Blob(b) => hex::encode(b),
        other => other.to_string(),
    }
}

pub fn parse_cell(text: &str, data_type: DataType, row: usize) -> Result<Value, TableError> {
    let bad = || TableError::BadValue { row, text: text.to_string(), data_type };
    Ok(match data_type {
        DataType::Int64 => Value::Int(text.trim().parse().map_err(|_| bad())?),
        DataType::Float64 => Value::Float(text.trim().parse().map_err(|_| bad())?),
        DataType::Text => Value::Text(text.to_string()),
        DataType::Blob => Value::Blob(hex::decode(text.trim()).map_err(|_| bad())?),
    })
}

/// Named base tables with a counter of executor reads.
#[derive(Debug, Default)]
pub struct TableSet {
    tables: BTreeMap<String, Table>,
    accesses: AtomicU64,
}

impl Clone for TableSet {
    fn clone(&self) -> Self {
        TableSet { tables: self.tables.clone(), accesses: AtomicU64::new(self.access_count()) }
    }
}

impl TableSet {
    pub fn new() -> Self {
        TableSet::default()
    }

    pub fn insert(&mut self, name: &str, table: Table) {
        self.tables.insert(name.to_string(), table);
    }

    /// Reads a table for query evaluation; counted.
    pub fn read(&self, name: &str) -> Option<&Table> {
        self.accesses.fetch_add(1, Ordering::SeqCst);
        self.tables.get(name)
    }

    /// Reads a table for metadata purposes (redaction previews, tuple taint
    /// checks, fingerprints); not counted.
    pub fn peek(&self, name: &str) -> Option<&Table> {
        self.tables.get(name)
    }

    pub fn access_count(&self) -> u64 {
        self.accesses.load(Ordering::SeqCst)
    }

    pub fn reset_access_count(&self) {
        self.accesses.store(0, Ordering::SeqCst);
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tables.keys()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> Vec<Column> {
        vec![Column::new("id", DataType::Int64), Column::new("x", DataType::Float64), Column::new("img", DataType::Blob)]
    }

    #[test]
    fn csv_round_trip() {
        let mut t = Table::new(schema());
        t.push(vec![Value::Int(1), Value::Float(0.5), Value::Blob(vec![0, 255])]).unwrap();
        let bytes = t.csv_bytes();
        assert_eq!(Table::read_csv(&bytes[..], &schema()).unwrap(), t);
    }

    #[test]
    fn jsonl_round_trip() {
        let mut t = Table::new(schema());
        t.push(vec![Value::Int(7), Value::Float(-2.25), Value::Blob(vec![1, 2, 3])]).unwrap();
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        assert_eq!(Table::read_jsonl(&buf[..], &schema()).unwrap(), t);
    }

    #[test]
    fn access_counter() {
        let mut s = TableSet::new();
        s.insert("T", Table::new(schema()));
        s.peek("T");
        assert_eq!(s.access_count(), 0);
        s.read("T");
        assert_eq!(s.access_count(), 1);
    }
}
