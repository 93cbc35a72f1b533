use dpd_core::optimizer::Constraints;
use dpd_core::scenario::IMDB_QUERY;
use dpd_core::service::*;

fn imdb(dir: &std::path::Path) -> Service {
    Service::init(dir, "imdb_sentiment", None).unwrap()
}

fn analyze(svc: &mut Service, sql: &str, user: &str, role: &str) -> Result<AnalyzeResponse, ServiceError> {
    svc.analyze(AnalyzeRequest { sql: sql.into(), user: user.into(), role: role.into() })
}

fn rec(svc: &mut Service, session: &str) -> Result<RecommendResponse, ServiceError> {
    svc.recommend(RecommendRequest { session: session.into(), constraints: None, seed: 0 })
}

#[test]
fn lifecycle_and_status_codes() {
    let dir = tempfile::tempdir().unwrap();
    let mut svc = imdb(dir.path());

    let a = AnnotateRequest {
        relation: "IMDB_MOVIE_REVIEW".into(),
        attributes: vec!["Review".into()],
        tuple_predicate: None,
        per_role_epsilon: [("data_scientist".to_string(), 8.0)].into(),
        expected_version: Some(0),
    };
    // Already applied by the scenario: a no-op, whatever the version.
    let r = svc.annotate(a.clone()).unwrap();
    assert!(!r.changed);
    let again = svc.annotate(a.clone()).unwrap();
    assert_eq!(r, again);
    let stale = AnnotateRequest { attributes: vec!["date".into()], ..a };
    assert_eq!(svc.annotate(stale).unwrap_err().status, 409);

    assert_eq!(svc.catalog("nobody").unwrap_err().status, 404);
    let listing = svc.catalog("data_scientist").unwrap();
    assert!(listing.relations[0].attributes.iter().any(|x| x.name == "Review" && x.redacted));

    let err = analyze(&mut svc, "SELECT count(*) FROM\n  WHERE", "alice", "data_scientist").unwrap_err();
    assert_eq!((err.status, err.code.as_str()), (400, "syntax_error"));
    assert_eq!(err.detail["line"], 2);

    let s = analyze(&mut svc, IMDB_QUERY, "alice", "data_scientist").unwrap();
    assert!(s.needs_protection);
    assert!(s.dot.starts_with("digraph"));
    let early = svc.execute(ExecuteRequest { session: s.session_id.clone() }).unwrap_err();
    assert_eq!(early.status, 409);
    let early = svc.select(SelectRequest { session: s.session_id.clone(), plan_id: "x".into() }).unwrap_err();
    assert_eq!(early.status, 409);

    let r = rec(&mut svc, &s.session_id).unwrap();
    assert!(!r.top_k.is_empty() && r.top_k.len() <= 3);
    assert_eq!(svc.select(SelectRequest { session: s.session_id.clone(), plan_id: "nope".into() }).unwrap_err().status, 404);
    let pick = r.top_k[0].plan_id.clone();
    let never = svc.feedback(FeedbackRequest { plan_id: pick.clone(), latency_ms: Some(3.0), accuracy: Some(0.9) }).unwrap_err();
    assert_eq!(never.status, 409);
    let sel = svc.select(SelectRequest { session: s.session_id.clone(), plan_id: pick.clone() }).unwrap();
    assert_eq!(sel.plan_id, pick);
    let before = svc.budget("alice", Some("IMDB_MOVIE_REVIEW")).unwrap();
    let ex = svc.execute(ExecuteRequest { session: s.session_id.clone() }).unwrap();
    let after = svc.budget("alice", Some("IMDB_MOVIE_REVIEW")).unwrap();
    assert!((before.user_remaining - after.user_remaining - ex.receipt.epsilon_charged).abs() < 1e-9);
    assert_eq!(ex.rows.len(), 1);
    let fb = svc.feedback(FeedbackRequest { plan_id: pick, latency_ms: Some(3.0), accuracy: Some(0.9) }).unwrap();
    assert_eq!(fb.recorded, 1);
    assert_eq!(svc.session(&s.session_id).unwrap().stage, Stage::Feedback);

    let snapshot = (svc.catalog("data_scientist").unwrap(), svc.budget("alice", Some("IMDB_MOVIE_REVIEW")).unwrap(), svc.session(&s.session_id).unwrap().clone());
    drop(svc);
    let svc = Service::open(dir.path()).unwrap();
    let reopened = (svc.catalog("data_scientist").unwrap(), svc.budget("alice", Some("IMDB_MOVIE_REVIEW")).unwrap(), svc.session(&s.session_id).unwrap().clone());
    assert_eq!(snapshot.0, reopened.0);
    assert_eq!(snapshot.1, reopened.1);
    let (x, y) = (serde_json::to_string(&snapshot.2).unwrap(), serde_json::to_string(&reopened.2).unwrap());
    if x != y {
        let i = x.bytes().zip(y.bytes()).position(|(a, b)| a != b).unwrap_or(0);
        panic!("session differs at {i}: {} | {}", &x[i.saturating_sub(200)..(i + 100).min(x.len())], &y[i.saturating_sub(200)..(i + 100).min(y.len())]);
    }
    assert_eq!(snapshot.2, reopened.2);
}

#[test]
fn untainted_query_needs_no_plan() {
    let dir = tempfile::tempdir().unwrap();
    let mut svc = imdb(dir.path());
    let s = analyze(&mut svc, "SELECT R.review_id FROM IMDB_MOVIE_REVIEW R WHERE R.review_id < 4", "alice", "data_scientist").unwrap();
    assert!(!s.needs_protection);
    let r = rec(&mut svc, &s.session_id).unwrap();
    assert!(r.no_protection_needed && r.top_k.is_empty());
    svc.select(SelectRequest { session: s.session_id.clone(), plan_id: "baseline".into() }).unwrap();
    let ex = svc.execute(ExecuteRequest { session: s.session_id }).unwrap();
    assert_eq!(ex.rows.len(), 3);
    assert_eq!(ex.receipt.epsilon_charged, 0.0);
}

#[test]
fn budget_exhaustion_and_admin_gate() {
    let dir = tempfile::tempdir().unwrap();
    let mut svc = imdb(dir.path());
    let s = analyze(&mut svc, IMDB_QUERY, "alice", "data_scientist").unwrap();
    let high = Constraints { max_epsilon: Some(12.0), ..Constraints::default() };
    let denied = svc.recommend(RecommendRequest { session: s.session_id.clone(), constraints: Some(high.clone()), seed: 0 }).unwrap_err();
    assert_eq!(denied.status, 403);
    let root = analyze(&mut svc, IMDB_QUERY, "root", "admin").unwrap();
    svc.recommend(RecommendRequest { session: root.session_id, constraints: Some(high), seed: 0 }).unwrap();

    let tiny = Constraints { min_accuracy: Some(0.999_999), ..Constraints::default() };
    let none = svc.recommend(RecommendRequest { session: s.session_id.clone(), constraints: Some(tiny), seed: 0 }).unwrap_err();
    assert_eq!((none.status, none.code.as_str()), (409, "no_feasible_plan"));

    let r = rec(&mut svc, &s.session_id).unwrap();
    svc.select(SelectRequest { session: s.session_id.clone(), plan_id: r.top_k[0].plan_id.clone() }).unwrap();
    let mut last = None;
    for _ in 0..200 {
        svc.env().tables.reset_access_count();
        match svc.execute(ExecuteRequest { session: s.session_id.clone() }) {
            Ok(_) => continue,
            Err(e) => {
                last = Some(e);
                break;
            }
        }
    }
    let e = last.expect("budget runs out");
    assert_eq!((e.status, e.code.as_str()), (402, "insufficient_budget"));
    assert_eq!(svc.env().tables.access_count(), 0);
}

#[test]
fn random_call_sequences_never_corrupt_sessions() {
    use rand::{Rng, SeedableRng};
    use std::collections::{BTreeMap, BTreeSet};
    let dir = tempfile::tempdir().unwrap();
    let mut svc = imdb(dir.path());
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
    let mut sessions: Vec<String> = Vec::new();
    let mut picks: BTreeMap<String, String> = BTreeMap::new();
    let mut executed: BTreeSet<String> = BTreeSet::new();
    let snapshot = |svc: &Service, id: &str| serde_json::to_string(svc.session(id).unwrap()).unwrap();
    for step in 0..60 {
        if sessions.is_empty() || rng.random_bool(0.15) {
            let sql = if rng.random_bool(0.7) { IMDB_QUERY } else { "SELECT R.review_id FROM IMDB_MOVIE_REVIEW R WHERE R.review_id < 3" };
            sessions.push(analyze(&mut svc, sql, "alice", "data_scientist").unwrap().session_id);
            continue;
        }
        let id = sessions[rng.random_range(0..sessions.len())].clone();
        let stage = svc.session(&id).unwrap().stage;
        let before = snapshot(&svc, &id);
        let feedback_plan = svc.session(&id).unwrap().selected.as_ref().map_or("nothing".to_string(), |s| s.plan_id.clone());
        let (call, allowed, result) = match rng.random_range(0..4) {
            0 => {
                let r = rec(&mut svc, &id);
                if let Ok(r) = &r {
                    let pick = if r.no_protection_needed { "baseline".to_string() } else { r.top_k[0].plan_id.clone() };
                    picks.insert(id.clone(), pick);
                }
                ("recommend", matches!(stage, Stage::Analyzed | Stage::Recommended), r.map(|_| ()))
            }
            1 => {
                let plan_id = picks.get(&id).cloned().unwrap_or_else(|| "baseline".into());
                ("select", matches!(stage, Stage::Recommended | Stage::Selected), svc.select(SelectRequest { session: id.clone(), plan_id }).map(|_| ()))
            }
            2 => {
                let r = svc.execute(ExecuteRequest { session: id.clone() });
                if r.is_ok() {
                    executed.insert(feedback_plan.clone());
                }
                ("execute", stage >= Stage::Selected, r.map(|_| ()))
            }
            _ => {
                let ok = executed.contains(&feedback_plan);
                let r = svc.feedback(FeedbackRequest { plan_id: feedback_plan, latency_ms: Some(1.0), accuracy: Some(0.9) });
                ("feedback", ok, r.map(|_| ()))
            }
        };
        match result {
            Ok(()) => assert!(allowed, "step {step}: {call} accepted at {stage:?}"),
            Err(e) => {
                if allowed {
                    assert!(e.status == 402 || e.code == "no_feasible_plan", "step {step}: {call} rejected at {stage:?}: {e:?}");
                } else {
                    assert_eq!(e.status, 409, "step {step}: {call} at {stage:?}: {e:?}");
                }
                assert_eq!(before, snapshot(&svc, &id), "step {step}: failed {call} changed the session");
            }
        }
    }
    assert!(!executed.is_empty());
}
