use std::collections::BTreeSet;

use proptest::prelude::*;

use dpd_core::catalog::{AttributeDescriptor, BudgetLedger, Catalog, RelationDescriptor, RelationTaint, TaintSet};
use dpd_core::dp::{clip_l2, dp_sgd_epsilon, laplace_mechanism};
use dpd_core::frontend::{self, Literal};
use dpd_core::ir::{lower, IrGraph};
use dpd_core::optimizer::{pareto_front, select, Constraints, CostVector};
use dpd_core::rewrite::{CandidatePlan, ModelBinding, RewriteSpec, RuleId};
use dpd_core::taint::propagate_with;
use dpd_core::types::DataType;

fn cost() -> impl Strategy<Value = CostVector> {
    (0u8..6, 0u8..6, 0u8..6).prop_map(|(e, a, l)| CostVector { epsilon: e as f64 * 0.5, acc_drop: a as f64 * 0.1, latency_ms: l as f64 })
}

fn plan(i: usize, region: usize, c: CostVector) -> CandidatePlan {
    CandidatePlan {
        plan_id: format!("p{i}"),
        region_root: region,
        rule: RuleId::S4OutputPerturbation,
        scheme: "S4".into(),
        task_key: "t".into(),
        epsilon: c.epsilon,
        model_binding: ModelBinding::None,
        spec: RewriteSpec { root: region, region: BTreeSet::new(), replacement: vec![] },
        rewritten: IrGraph::new(),
        explanation: String::new(),
        training_rows: 0,
        cost: Some(c),
    }
}

fn catalog() -> Catalog {
    let mut c = Catalog::new();
    let attrs = ["id", "a", "b"].iter().map(|n| AttributeDescriptor::new(n, DataType::Int64)).collect();
    c.add_relation(RelationDescriptor::new("T", attrs, 10)).unwrap();
    let attrs = ["id", "d"].iter().map(|n| AttributeDescriptor::new(n, DataType::Int64)).collect();
    c.add_relation(RelationDescriptor::new("U", attrs, 10)).unwrap();
    c
}

const QUERIES: [&str; 4] = [
    "SELECT T.a FROM T WHERE T.b < 3",
    "SELECT count(*) FROM T JOIN U ON T.id = U.id WHERE U.d = 1",
    "SELECT T.a, sum(T.b) FROM T GROUP BY T.a",
    "SELECT U.d FROM T JOIN U ON T.a = U.id",
];

proptest! {
    #[test]
    fn front_is_exactly_the_undominated(costs in prop::collection::vec(cost(), 0..40)) {
        let front = pareto_front(&costs);
        let set: BTreeSet<usize> = front.iter().copied().collect();
        for i in 0..costs.len() {
            let dominated = costs.iter().any(|o| o.dominates(&costs[i]));
            prop_assert_eq!(set.contains(&i), !dominated);
        }
        for w in front.windows(2) {
            let (a, b) = (&costs[w[0]], &costs[w[1]]);
            prop_assert!(a.epsilon < b.epsilon || (a.epsilon == b.epsilon && a.latency_ms <= b.latency_ms));
        }
    }

    #[test]
    fn selection_respects_cap_and_ranks_by_score(
        costs in prop::collection::vec((cost(), 0usize..3), 1..12),
        budget in 0.0f64..6.0,
        cap in prop::option::of(0.0f64..6.0),
    ) {
        let plans: Vec<CandidatePlan> = costs.iter().enumerate().map(|(i, (c, r))| plan(i, *r, *c)).collect();
        let c = Constraints { max_epsilon: cap, ..Constraints::default() };
        if let Ok(sel) = select(&plans, budget, &c) {
            let limit = cap.map_or(budget, |m| m.min(budget));
            prop_assert!(sel.chosen.cost.epsilon <= limit + 1e-9);
            prop_assert_eq!(&sel.top_k[0], &sel.chosen);
            for w in sel.top_k.windows(2) {
                prop_assert!(w[0].score <= w[1].score);
            }
            let regions: BTreeSet<usize> = plans.iter().map(|p| p.region_root).collect();
            prop_assert_eq!(sel.chosen.plan_ids.len(), regions.len());
        }
    }

    #[test]
    fn ledger_debits_are_atomic_and_replayable(
        budgets in (0.0f64..5.0, 0.0f64..5.0, 0.0f64..5.0),
        debits in prop::collection::vec((0.0f64..2.0, any::<bool>()), 0..20),
    ) {
        let mut l = BudgetLedger::default();
        l.set_user_budget("u", budgets.0, 1e-5).unwrap();
        l.set_dataset_budget("A", budgets.1, 1e-5).unwrap();
        l.set_dataset_budget("B", budgets.2, 1e-5).unwrap();
        for (eps, both) in debits {
            let ds: Vec<String> = if both { vec!["A".into(), "B".into()] } else { vec!["A".into()] };
            let before = l.clone();
            match l.debit_many(&ds, "u", eps, "p") {
                Ok((_, charged)) => {
                    prop_assert!(charged >= eps);
                    prop_assert!(l.user_remaining("u").unwrap() >= 0.0);
                }
                Err(_) => prop_assert_eq!(&l, &before),
            }
        }
        let (ds, us) = l.replay();
        prop_assert_eq!(us["u"], l.user_remaining("u").unwrap());
        prop_assert_eq!(ds["A"], l.dataset_remaining("A").unwrap());
        prop_assert_eq!(ds["B"], l.dataset_remaining("B").unwrap());
    }

    #[test]
    fn clipping_bounds_norm_and_keeps_direction(v in prop::collection::vec(-1e3f64..1e3, 1..32), c in 1e-3f64..1e2) {
        let mut w = v.clone();
        clip_l2(&mut w, c);
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        prop_assert!(norm(&w) <= c + 1e-12);
        if norm(&v) <= c {
            prop_assert_eq!(&w, &v);
        }
        for (a, b) in v.iter().zip(&w) {
            prop_assert!(a * b >= 0.0);
        }
    }

    #[test]
    fn epsilon_monotone(sigma in 0.2f64..10.0, t in 1u64..2000, dt in 1u64..100) {
        prop_assert!(dp_sgd_epsilon(sigma, t + dt, 1.0, 1e-5) > dp_sgd_epsilon(sigma, t, 1.0, 1e-5));
        prop_assert!(dp_sgd_epsilon(sigma * 1.5, t, 1.0, 1e-5) < dp_sgd_epsilon(sigma, t, 1.0, 1e-5));
    }

    #[test]
    fn laplace_mechanism_is_seeded(x in -1e3f64..1e3, eps in 0.01f64..10.0, seed in any::<u64>()) {
        prop_assert_eq!(laplace_mechanism(x, 1.0, eps, seed).unwrap(), laplace_mechanism(x, 1.0, eps, seed).unwrap());
    }

    #[test]
    fn literals_round_trip(s in ".{0,12}", i in any::<i64>(), f in -1e12f64..1e12) {
        for lit in [Literal::Str(s.clone()), Literal::Int(i), Literal::Float(f)] {
            let sql = format!("SELECT * FROM T WHERE a = {lit}");
            let q = frontend::parse(&sql).unwrap();
            prop_assert_eq!(&q.where_clause[0].right, &frontend::Operand::Literal(lit));
        }
    }

    #[test]
    fn more_taint_never_untaints(q in 0usize..QUERIES.len(), small in prop::collection::btree_set(0usize..5, 0..5), extra in prop::collection::btree_set(0usize..5, 0..5)) {
        let cat = catalog();
        let ir = lower(&frontend::compile(QUERIES[q], &cat).unwrap(), &cat).unwrap();
        let names = [("T", "id"), ("T", "a"), ("T", "b"), ("U", "id"), ("U", "d")];
        let taints = |idx: &BTreeSet<usize>| {
            let mut t = TaintSet::new();
            for &i in idx {
                t.entry(names[i].0.to_string()).or_insert_with(RelationTaint::default).attributes.insert(names[i].1.to_string());
            }
            t
        };
        let big: BTreeSet<usize> = small.union(&extra).copied().collect();
        let (a, b) = (propagate_with(&ir, &taints(&small), None), propagate_with(&ir, &taints(&big), None));
        for (x, y) in a.edges.iter().zip(&b.edges) {
            prop_assert!(!x.taint.is_tainted() || y.taint.is_tainted());
            prop_assert!(x.taint.attributes.is_subset(&y.taint.attributes));
        }
    }
}
