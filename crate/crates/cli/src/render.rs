//! Table, JSON and CSV renderings of command results.

use std::fmt::Write as _;

use clap::ValueEnum;
use serde::Serialize;

use dpd_core::exec::table::cell_text;
use dpd_core::exec::Table;
use dpd_core::scenario::SweepRow;
use dpd_core::service::{AnalyzeResponse, ExecuteResponse, RecommendResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Table,
    Json,
    Csv,
}

pub fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable") + "\n"
}

fn csv_of(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
}

fn table_of(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (i, c) in r.iter().enumerate() {
            widths[i] = widths[i].max(c.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: Vec<&str>, out: &mut String| {
        let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(header.to_vec(), &mut out);
    for r in rows {
        line(r.iter().map(String::as_str).collect(), &mut out);
    }
    out
}

fn tabular(format: Format, header: &[&str], rows: &[Vec<String>]) -> String {
    match format {
        Format::Csv => csv_of(header, rows),
        _ => table_of(header, rows),
    }
}

pub fn rows(format: Format, t: &Table) -> String {
    let header: Vec<&str> = t.columns.iter().map(|c| c.name.as_str()).collect();
    let body: Vec<Vec<String>> = t.rows.iter().map(|r| r.iter().map(cell_text).collect()).collect();
    tabular(format, &header, &body)
}

pub fn analysis(format: Format, a: &AnalyzeResponse) -> String {
    match format {
        Format::Json => json(a),
        _ => {
            let header = ["session", "region_root", "anchored", "tainted_inputs", "reason"];
            let body: Vec<Vec<String>> = a
                .regions
                .iter()
                .map(|r| {
                    vec![
                        a.session_id.clone(),
                        r.root.to_string(),
                        r.anchored.to_string(),
                        r.tainted_inputs.iter().cloned().collect::<Vec<_>>().join(" "),
                        r.reason.clone(),
                    ]
                })
                .collect();
            if body.is_empty() && format == Format::Table {
                return format!("session {}: no sensitive regions\n", a.session_id);
            }
            tabular(format, &header, &body)
        }
    }
}

pub fn recommendation(format: Format, r: &RecommendResponse) -> String {
    if format == Format::Json {
        return json(r);
    }
    if r.no_protection_needed {
        return "no protection needed\n".into();
    }
    let header = ["rank", "plan_id", "schemes", "epsilon", "accuracy", "latency_ms", "score"];
    let body: Vec<Vec<String>> = r
        .top_k
        .iter()
        .map(|p| {
            vec![
                p.rank.to_string(),
                p.plan_id.clone(),
                p.schemes.join("+"),
                format!("{}", p.cost.epsilon),
                format!("{:.4}", 1.0 - p.cost.acc_drop),
                format!("{:.1}", p.cost.latency_ms),
                format!("{:.4}", p.score),
            ]
        })
        .collect();
    tabular(format, &header, &body)
}

pub fn execution(format: Format, e: &ExecuteResponse) -> String {
    match format {
        Format::Json => json(e),
        Format::Csv => rows(format, &e.rows),
        Format::Table => {
            let mut s = rows(format, &e.rows);
            let _ = writeln!(
                s,
                "-- plan {} charged ε={} to {} ({}), {} row(s)",
                e.receipt.plan_id,
                e.receipt.epsilon_charged,
                e.receipt.user,
                e.receipt.datasets.join(", "),
                e.receipt.rows_out
            );
            s
        }
    }
}

pub const SWEEP_HEADER: [&str; 4] = ["epsilon", "noise_multiplier", "receipt_epsilon", "test_accuracy"];

pub fn sweep(format: Format, rows: &[SweepRow]) -> String {
    if format == Format::Json {
        return json(&rows);
    }
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| vec![r.epsilon.to_string(), format!("{:.6}", r.noise_multiplier), format!("{:.6}", r.receipt_epsilon), format!("{:.4}", r.test_accuracy)])
        .collect();
    tabular(format, &SWEEP_HEADER, &body)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    sweep(Format::Csv, rows)
}
