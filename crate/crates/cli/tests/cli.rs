use std::path::Path;
use std::process::{Command, Output};

use dpd_cli::{exit_code, fixtures_root};
use dpd_core::scenario::IMDB_QUERY;
use dpd_core::service::*;

fn dpd(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dpd")).arg("--data-dir").arg(dir).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = dpd(dir.path(), &["recommend"]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(stdout(&ok).starts_with("rank"));

    assert_eq!(dpd(dir.path(), &["recommend", "--max-epsilon", "0.00001"]).status.code(), Some(2));
    assert_eq!(dpd(dir.path(), &["analyze", "--sql", "SELECT FROM"]).status.code(), Some(1));
    assert_eq!(dpd(dir.path(), &["nonsense"]).status.code(), Some(64));
    assert_eq!(dpd(dir.path(), &["recommend", "--query", "missing"]).status.code(), Some(1));
}

#[test]
fn untainted_query_prints_no_protection_needed() {
    let dir = tempfile::tempdir().unwrap();
    let o = dpd(dir.path(), &["recommend", "--sql", "SELECT R.review_id FROM IMDB_MOVIE_REVIEW R"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(stdout(&o), "no protection needed\n");
    let o = dpd(dir.path(), &["execute", "--sql", "SELECT count(*) FROM IMDB_MOVIE_REVIEW R"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("charged ε=0"), "{}", stdout(&o));
}

#[test]
fn execute_drains_until_no_plan_fits() {
    let dir = tempfile::tempdir().unwrap();
    let mut runs = 0;
    let code = loop {
        let o = dpd(dir.path(), &["execute", "--plan", "r4-S4-laplace-e2"]);
        match o.status.code() {
            Some(0) => runs += 1,
            c => break c,
        }
        assert!(runs < 100);
    };
    // alice holds ε=50, and each run charges 2.
    assert_eq!((runs, code), (25, Some(2)));
    let report = stdout(&dpd(dir.path(), &["report", "--format", "csv"]));
    assert!(report.contains("user,alice,0\n"), "{report}");
}

#[test]
fn insufficient_budget_maps_to_exit_three() {
    // Two sessions recommended against the same budget; the second
    // execute finds it drained.
    let dir = tempfile::tempdir().unwrap();
    let mut svc = Service::init(dir.path(), "imdb_sentiment", fixtures_root().as_deref()).unwrap();
    let mut open = || {
        let a = svc.analyze(AnalyzeRequest { sql: IMDB_QUERY.into(), user: "alice".into(), role: "data_scientist".into() }).unwrap();
        let r = svc.recommend(RecommendRequest { session: a.session_id.clone(), constraints: None, seed: 0 }).unwrap();
        let top = r.top_k.iter().max_by(|x, y| x.cost.epsilon.total_cmp(&y.cost.epsilon)).unwrap().plan_id.clone();
        svc.select(SelectRequest { session: a.session_id.clone(), plan_id: top }).unwrap();
        a.session_id
    };
    let sessions: Vec<String> = (0..30).map(|_| open()).collect();
    let err = sessions.iter().find_map(|s| svc.execute(ExecuteRequest { session: s.clone() }).err()).unwrap();
    assert_eq!((err.status, err.code.as_str()), (402, "insufficient_budget"));
    assert_eq!(exit_code(&err), 3);
}

#[test]
fn recommend_matches_the_service() {
    let dir = tempfile::tempdir().unwrap();
    let o = dpd(dir.path(), &["recommend", "--format", "json", "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0));
    let cli: RecommendResponse = serde_json::from_slice(&o.stdout).unwrap();

    let other = tempfile::tempdir().unwrap();
    let mut svc = Service::init(other.path(), "imdb_sentiment", fixtures_root().as_deref()).unwrap();
    let a = svc.analyze(AnalyzeRequest { sql: IMDB_QUERY.into(), user: "alice".into(), role: "data_scientist".into() }).unwrap();
    let c = svc.default_constraints().clone();
    let direct = svc.recommend(RecommendRequest { session: a.session_id, constraints: Some(c), seed: 5 }).unwrap();
    assert_eq!(cli.top_k, direct.top_k);
    assert_eq!(cli.candidates, direct.candidates);
}

#[test]
fn sweep_report_is_monotone_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("sweep.csv");
    let o = dpd(dir.path(), &["--scenario", "imdb_sweep", "report", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(&out).unwrap();
    let mut rows = csv::Reader::from_reader(text.as_bytes());
    assert_eq!(rows.headers().unwrap().iter().collect::<Vec<_>>(), dpd_cli::render::SWEEP_HEADER);
    let parsed: Vec<Vec<f64>> = rows.records().map(|r| r.unwrap().iter().map(|c| c.parse().unwrap()).collect()).collect();
    assert!(parsed.len() >= 3);
    for w in parsed.windows(2) {
        assert!(w[0][0] < w[1][0]);
        // More ε buys less noise, and the accountant hits each target.
        assert!(w[0][1] > w[1][1]);
        assert!(w[1][3] >= w[0][3] - 1e-9);
    }
    for r in &parsed {
        assert!(r[2] <= r[0] + 1e-6);
    }
}
