use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dpd_cli::render::{self, Format};
use dpd_cli::{exit_code, fixtures_root, http};
use dpd_core::scenario;
use dpd_core::service::{
    AnalyzeRequest, AnnotateRequest, ExecuteRequest, FeedbackRequest, RecommendRequest, SelectRequest, Service, ServiceError,
};

#[derive(Parser)]
#[command(name = "dpd", version, about = "Privacy-preserving inference queries")]
struct Cli {
    /// Directory holding the scenario bundle and persisted state.
    #[arg(long, global = true, env = "DPD_DATA_DIR", default_value = "dpd-data")]
    data_dir: PathBuf,
    /// Scenario (bundled name or bundle directory) used to seed an empty data directory.
    #[arg(long, global = true, default_value = "imdb_sentiment")]
    scenario: String,
    #[arg(long, global = true, value_enum, default_value = "table")]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct QueryArgs {
    /// Query text; defaults to the scenario query named by --query.
    #[arg(long)]
    sql: Option<String>,
    /// Name of a scenario query (default: the first one).
    #[arg(long)]
    query: Option<String>,
    #[arg(long)]
    user: Option<String>,
    #[arg(long)]
    role: Option<String>,
}

#[derive(Args, Clone)]
struct PlanArgs {
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_epsilon: Option<f64>,
    #[arg(long)]
    min_accuracy: Option<f64>,
    #[arg(long)]
    max_latency_ms: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Mark attributes tainted in the catalog.
    Annotate {
        /// JSON annotation request; overrides the flags below.
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long)]
        relation: Option<String>,
        #[arg(long, value_delimiter = ',')]
        attributes: Vec<String>,
        /// Per-role ε default, as role=epsilon.
        #[arg(long = "epsilon", value_parser = parse_role_eps)]
        epsilons: Vec<(String, f64)>,
        #[arg(long)]
        expected_version: Option<u64>,
    },
    /// Parse, lower and taint-check a query.
    Analyze {
        #[command(flatten)]
        q: QueryArgs,
        /// Write the annotated plan as Graphviz to this file.
        #[arg(long)]
        dot: Option<PathBuf>,
    },
    /// Rank protected plans for a query.
    Recommend {
        #[command(flatten)]
        q: QueryArgs,
        #[command(flatten)]
        p: PlanArgs,
    },
    /// Run a query under a recommended plan, charging its ε.
    Execute {
        #[command(flatten)]
        q: QueryArgs,
        #[command(flatten)]
        p: PlanArgs,
        /// Plan id from `recommend` (default: the top-ranked plan).
        #[arg(long)]
        plan: Option<String>,
    },
    /// Report observed accuracy and latency of an executed plan.
    Feedback {
        #[arg(long)]
        plan: String,
        #[arg(long)]
        accuracy: Option<f64>,
        #[arg(long)]
        latency_ms: Option<f64>,
    },
    /// Accuracy-vs-ε sweep for scenarios that define one, else remaining budgets.
    Report {
        /// Where to write the CSV (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API.
    Serve {
        #[arg(long, env = "DPD_ADDR", default_value = "127.0.0.1:8080")]
        addr: String,
    },
}

fn parse_role_eps(s: &str) -> Result<(String, f64), String> {
    let (r, e) = s.split_once('=').ok_or("expected role=epsilon")?;
    Ok((r.to_string(), e.parse().map_err(|e| format!("bad epsilon: {e}"))?))
}

fn usage(msg: impl Into<String>) -> ServiceError {
    ServiceError::new(400, "invalid_request", msg)
}

fn open(cli: &Cli) -> Result<Service, ServiceError> {
    Service::init(&cli.data_dir, &cli.scenario, fixtures_root().as_deref())
}

fn resolve(svc: &Service, q: &QueryArgs) -> Result<AnalyzeRequest, ServiceError> {
    let named = svc.scenario().and_then(|s| match &q.query {
        Some(n) => s.queries.iter().find(|x| &x.name == n),
        None => s.queries.first(),
    });
    if q.query.is_some() && named.is_none() {
        return Err(usage(format!("no scenario query named '{}'", q.query.as_deref().unwrap_or_default())));
    }
    let sql = q.sql.clone().or_else(|| named.map(|n| n.sql.clone())).ok_or_else(|| usage("--sql is required"))?;
    let user = q.user.clone().or_else(|| named.map(|n| n.user.clone())).ok_or_else(|| usage("--user is required"))?;
    let role = q.role.clone().or_else(|| svc.role_of(&user).map(str::to_string)).ok_or_else(|| usage("--role is required"))?;
    Ok(AnalyzeRequest { sql, user, role })
}

fn constraints(svc: &Service, p: &PlanArgs) -> dpd_core::optimizer::Constraints {
    let mut c = svc.default_constraints().clone();
    if let Some(k) = p.k {
        c.k = k;
    }
    c.max_epsilon = p.max_epsilon.or(c.max_epsilon);
    c.min_accuracy = p.min_accuracy.or(c.min_accuracy);
    c.max_latency_ms = p.max_latency_ms.or(c.max_latency_ms);
    c
}

fn run(cli: Cli) -> Result<String, ServiceError> {
    match &cli.command {
        Command::Annotate { file, relation, attributes, epsilons, expected_version } => {
            let req = match file {
                Some(f) => {
                    let text = std::fs::read_to_string(f).map_err(|e| usage(format!("{}: {e}", f.display())))?;
                    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", f.display())))?
                }
                None => AnnotateRequest {
                    relation: relation.clone().ok_or_else(|| usage("--relation or --file is required"))?,
                    attributes: attributes.clone(),
                    tuple_predicate: None,
                    per_role_epsilon: epsilons.iter().cloned().collect::<BTreeMap<_, _>>(),
                    expected_version: *expected_version,
                },
            };
            let r = open(&cli)?.annotate(req)?;
            Ok(match cli.format {
                Format::Json => render::json(&r),
                _ => format!("catalog version {}{}\n", r.version, if r.changed { "" } else { " (unchanged)" }),
            })
        }
        Command::Analyze { q, dot } => {
            let mut svc = open(&cli)?;
            let req = resolve(&svc, q)?;
            let a = svc.analyze(req)?;
            if let Some(p) = dot {
                std::fs::write(p, &a.dot).map_err(|e| usage(format!("{}: {e}", p.display())))?;
            }
            Ok(render::analysis(cli.format, &a))
        }
        Command::Recommend { q, p } => {
            let mut svc = open(&cli)?;
            let req = resolve(&svc, q)?;
            let c = constraints(&svc, p);
            let a = svc.analyze(req)?;
            let r = svc.recommend(RecommendRequest { session: a.session_id, constraints: Some(c), seed: p.seed })?;
            Ok(render::recommendation(cli.format, &r))
        }
        Command::Execute { q, p, plan } => {
            let mut svc = open(&cli)?;
            let req = resolve(&svc, q)?;
            let c = constraints(&svc, p);
            let a = svc.analyze(req)?;
            let r = svc.recommend(RecommendRequest { session: a.session_id.clone(), constraints: Some(c), seed: p.seed })?;
            let plan_id = match plan {
                Some(p) => p.clone(),
                None if r.no_protection_needed => dpd_core::workflow::BASELINE_PLAN.to_string(),
                None => r.top_k[0].plan_id.clone(),
            };
            svc.select(SelectRequest { session: a.session_id.clone(), plan_id })?;
            let e = svc.execute(ExecuteRequest { session: a.session_id })?;
            Ok(render::execution(cli.format, &e))
        }
        Command::Feedback { plan, accuracy, latency_ms } => {
            let r = open(&cli)?.feedback(FeedbackRequest { plan_id: plan.clone(), latency_ms: *latency_ms, accuracy: *accuracy })?;
            Ok(match cli.format {
                Format::Json => render::json(&r),
                _ => format!("recorded feedback for {} ({} scheme(s))\n", r.plan_id, r.recorded),
            })
        }
        Command::Report { out } => {
            let (s, env) = scenario::load(&cli.scenario, fixtures_root().as_deref())?;
            let text = match &s.sweep {
                Some(spec) => {
                    let rows = scenario::sweep(&env.catalog, &env.tables, spec)?;
                    if let Some(p) = out {
                        std::fs::write(p, render::sweep_csv(&rows)).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                    }
                    render::sweep(cli.format, &rows)
                }
                None => {
                    let svc = open(&cli)?;
                    let mut rows = Vec::new();
                    let ledger = &svc.env().catalog.ledger;
                    for (u, a) in &ledger.user_budgets {
                        rows.push(vec!["user".to_string(), u.clone(), a.remaining_epsilon.to_string()]);
                    }
                    for (d, a) in &ledger.dataset_budgets {
                        rows.push(vec!["dataset".to_string(), d.clone(), a.remaining_epsilon.to_string()]);
                    }
                    let mut w = String::new();
                    for r in &rows {
                        w.push_str(&r.join(if cli.format == Format::Csv { "," } else { "  " }));
                        w.push('\n');
                    }
                    if let Some(p) = out {
                        std::fs::write(p, &w).map_err(|e| usage(format!("{}: {e}", p.display())))?;
                    }
                    w
                }
            };
            Ok(text)
        }
        Command::Serve { addr } => {
            let svc = open(&cli)?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| ServiceError::new(500, "internal", e.to_string()))?;
            rt.block_on(http::serve(svc, addr)).map_err(|e| ServiceError::new(500, "internal", e.to_string()))?;
            Ok(String::new())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(64) } else { ExitCode::SUCCESS };
        }
    };
    let format = cli.format;
    match run(cli) {
        Ok(out) => {
            print!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            if format == Format::Json {
                eprint!("{}", render::json(&e));
            } else {
                eprintln!("error: {}", e.message);
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
