use dpd_core::exec::{self, ExecContext, Table};
use dpd_core::optimizer::Constraints;
use dpd_core::rewrite::{ModelBinding, TrainingMethod};
use dpd_core::scenario;
use dpd_core::workflow::{analyze, realize, recommend, run, Analysis, Environment};

fn imdb() -> (Environment, Analysis, String) {
    let (s, env) = scenario::load("imdb_sentiment", None).unwrap();
    let q = &s.queries[0];
    let a = analyze(&env.catalog, Some(&env.tables), &q.sql, &q.user, "data_scientist").unwrap();
    (env, a, q.user.clone())
}

fn oracle(env: &Environment, a: &Analysis) -> Table {
    let ctx = ExecContext { tables: &env.tables, functions: &env.functions, registry: &env.registry };
    exec::evaluate(&a.ir, ctx, 0).unwrap().0
}

fn count(t: &Table) -> f64 {
    t.rows[0][0].as_f64().unwrap()
}

#[test]
fn imdb_chosen_plan_runs_and_charges_its_epsilon() {
    let (mut env, a, user) = imdb();
    assert_eq!(a.regions.len(), 1);
    let region = &a.regions[0];
    assert!(region.anchored);
    assert!(region.tainted_inputs.contains("R.Review"));

    let r = recommend(&env, &a, &Constraints::default(), 1).unwrap();
    assert!(r.plans.iter().all(|p| p.cost.is_some()));
    let sel = r.selection.clone().unwrap();
    let plans: Vec<_> = sel.chosen.plan_ids.iter().map(|id| r.plan(id).unwrap()).collect();
    let real = realize(&mut env, &a, &plans).unwrap();
    let before = env.catalog.ledger.user_remaining(&user).unwrap();
    let (rows, receipt) = run(&mut env, &real.ir, &user, &sel.chosen.plan_ids[0]).unwrap();
    assert_eq!(rows.rows.len(), 1);
    assert_eq!(receipt.epsilon_charged, sel.chosen.cost.epsilon);
    assert_eq!(before - env.catalog.ledger.user_remaining(&user).unwrap(), receipt.epsilon_charged);
}

#[test]
fn dp_trained_classifier_tracks_the_oracle() {
    let (mut env, a, user) = imdb();
    let want = count(&oracle(&env, &a));
    let r = recommend(&env, &a, &Constraints::default(), 1).unwrap();
    let p = r.plan("r4-S1-scratch-e8").unwrap();
    let real = realize(&mut env, &a, &[p]).unwrap();
    assert!(real.models[0].report.as_ref().unwrap().epsilon <= 8.0 + 1e-9);
    let (rows, receipt) = run(&mut env, &real.ir, &user, &p.plan_id).unwrap();
    assert!((count(&rows) - want).abs() <= 0.05 * want, "{} vs {want}", count(&rows));
    assert_eq!(receipt.epsilon_charged, 8.0);
}

#[test]
fn aggregate_model_learns_from_range_workloads() {
    // The IMDB predicate bounds one column from both sides; a workload
    // drawing both literals from one row would only ever see empty ranges.
    let (mut env, a, _) = imdb();
    let want = count(&oracle(&env, &a));
    let r = recommend(&env, &a, &Constraints::default(), 1).unwrap();
    let mut p = r.plan("r4-S2A-scratch-e8").unwrap().clone();
    let ModelBinding::Train(req) = &mut p.model_binding else { panic!("S2A trains a model") };
    req.dpsgd.noise_multiplier = 0.0;
    req.dpsgd.clip_norm = 1e12;
    req.dpsgd.steps = 300;
    req.method = TrainingMethod::Fixed { hidden: vec![16] };
    let real = realize(&mut env, &a, &[&p]).unwrap();
    assert!(real.models[0].training_accuracy.unwrap() > 0.3, "{:?}", real.models[0].training_accuracy);
    let ctx = ExecContext { tables: &env.tables, functions: &env.functions, registry: &env.registry };
    let got = count(&exec::evaluate(&real.ir, ctx, 0).unwrap().0);
    assert!(got > 0.0 && got < 2.0 * want, "{got} vs {want}");
}

#[test]
fn alzheimers_queries_all_have_plans() {
    let (s, mut env) = scenario::load("alzheimers_care", None).unwrap();
    for q in &s.queries {
        let a = analyze(&env.catalog, Some(&env.tables), &q.sql, &q.user, "nurse").unwrap();
        let r = recommend(&env, &a, &Constraints::default(), 1).unwrap_or_else(|e| panic!("{}: {e}", q.name));
        let Some(sel) = r.selection.clone() else { continue };
        let p = r.plan(&sel.chosen.plan_ids[0]).unwrap().clone();
        let real = realize(&mut env, &a, &[&p]).unwrap();
        let (_, receipt) = run(&mut env, &real.ir, &q.user, &p.plan_id).unwrap();
        assert_eq!(receipt.epsilon_charged, p.epsilon, "{}", q.name);
    }
}

#[test]
fn crossover_follows_the_budget() {
    let (s, mut env) = scenario::load("crossover", None).unwrap();
    let q = &s.queries[0];
    let mut picks = Vec::new();
    for b in [3.0, 10.0] {
        env.catalog.ledger.set_user_budget(&q.user, b, 1e-5).unwrap();
        let a = analyze(&env.catalog, Some(&env.tables), &q.sql, &q.user, "data_scientist").unwrap();
        let r = recommend(&env, &a, &s.constraints, 1).unwrap();
        let chosen = r.selection.clone().unwrap().chosen;
        assert!(chosen.cost.epsilon <= b);
        picks.push(r.plan(&chosen.plan_ids[0]).unwrap().scheme.clone());
    }
    assert_eq!(picks, ["S1:transfer", "S1:scratch"]);
}

#[test]
fn untainted_query_has_no_regions() {
    let (_, env) = scenario::load("imdb_sentiment", None).unwrap();
    let sql = "SELECT R.review_id FROM IMDB_MOVIE_REVIEW R WHERE R.review_id < 4";
    let a = analyze(&env.catalog, Some(&env.tables), sql, "alice", "data_scientist").unwrap();
    assert!(a.regions.is_empty());
    let project = a.dot.lines().find(|l| l.contains("Project(")).unwrap();
    assert!(!project.contains("[tainted]"), "{project}");
}
