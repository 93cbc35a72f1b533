//! The query lifecycle shared by the CLI and the service: analyze a query,
//! recommend protected plans, train what the chosen plans need, execute.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, CatalogError};
use crate::exec::{execute, ExecContext, ExecError, ExecutionReceipt, FunctionModels, Table, TableSet};
use crate::frontend::{compile, FrontendError};
use crate::ir::dot::to_dot;
use crate::ir::lower::{lower, LoweringError};
use crate::ir::IrGraph;
use crate::learn::ModelRegistry;
use crate::optimizer::{Constraints, CostModel, OptimizerError, Selection};
use crate::rewrite::{apply_all, enumerate, materialize, CandidatePlan, DroppedPlan, EnumerateInput, MaterializeOutcome, ModelBinding, RewriteError};
use crate::taint::{find_sensitive_regions, propagate, SensitiveRegion, TaintError};

pub const ADMIN_ROLE: &str = "admin";
/// Plan id used when a query needs no protection.
pub const BASELINE_PLAN: &str = "baseline";

/// Everything a query needs: catalog with ledger, data, model-call
/// implementations, trained models and the cost model.
pub struct Environment {
    pub catalog: Catalog,
    pub tables: TableSet,
    pub functions: FunctionModels,
    pub registry: ModelRegistry,
    pub cost_model: CostModel,
}

#[derive(Debug, thiserror::Error)]
pub enum WorkflowError {
    #[error(transparent)]
    Frontend(#[from] FrontendError),
    #[error(transparent)]
    Lowering(#[from] LoweringError),
    #[error(transparent)]
    Taint(#[from] TaintError),
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error(transparent)]
    Optimizer(#[from] OptimizerError),
    #[error(transparent)]
    Rewrite(#[from] RewriteError),
    #[error(transparent)]
    Exec(#[from] ExecError),
    #[error("unknown role '{0}'")]
    UnknownRole(String),
    #[error("role '{role}' may not raise the ε cap above {limit}")]
    Forbidden { role: String, limit: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub sql: String,
    pub user: String,
    pub role: String,
    /// Lowered IR; rewrite specs refer to its node ids.
    pub ir: IrGraph,
    /// `ir` with taint annotations on every edge.
    pub annotated: IrGraph,
    pub regions: Vec<SensitiveRegion>,
    pub dot: String,
}

impl Analysis {
    pub fn needs_protection(&self) -> bool {
        !self.regions.is_empty()
    }
}

pub fn analyze(catalog: &Catalog, tables: Option<&TableSet>, sql: &str, user: &str, role: &str) -> Result<Analysis, WorkflowError> {
    if !catalog.known_roles().contains(role) {
        return Err(WorkflowError::UnknownRole(role.to_string()));
    }
    let bound = compile(sql, catalog)?;
    let ir = lower(&bound, catalog)?;
    let annotated = propagate(&ir, catalog, role, tables)?;
    let regions = find_sensitive_regions(&annotated);
    let highlight: BTreeSet<_> = regions.iter().flat_map(|r| r.member_nodes.iter().copied()).collect();
    let dot = to_dot(&annotated, &highlight);
    Ok(Analysis { sql: sql.to_string(), user: user.to_string(), role: role.to_string(), ir, annotated, regions, dot })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    /// Every candidate, with its estimated cost.
    pub plans: Vec<CandidatePlan>,
    pub dropped: Vec<DroppedPlan>,
    /// `None` when the query needs no protection.
    pub selection: Option<Selection>,
    /// ε the plans were enumerated against.
    pub epsilon_cap: f64,
}

impl Recommendation {
    pub fn plan(&self, id: &str) -> Option<&CandidatePlan> {
        self.plans.iter().find(|p| p.plan_id == id)
    }
}

/// Per-query ε cap: the smaller of the remaining budget and the role
/// default. Only admins may set `max_epsilon` above the role default.
pub fn epsilon_cap(catalog: &Catalog, a: &Analysis, constraints: &Constraints) -> Result<f64, WorkflowError> {
    let relations = a.ir.relations();
    let remaining = catalog.ledger.remaining_for(&a.user, &relations)?;
    let role_eps = catalog.role_epsilon(&a.role, &relations);
    let limit = match constraints.max_epsilon {
        Some(m) if m > role_eps && a.role != ADMIN_ROLE => return Err(WorkflowError::Forbidden { role: a.role.clone(), limit: role_eps }),
        Some(m) => m,
        None => role_eps,
    };
    Ok(remaining.min(limit))
}

/// Enumerates and costs every rewrite, then selects. Deterministic for a
/// fixed state and seed.
pub fn recommend(env: &Environment, a: &Analysis, constraints: &Constraints, seed: u64) -> Result<Recommendation, WorkflowError> {
    let cap = epsilon_cap(&env.catalog, a, constraints)?;
    if !a.needs_protection() {
        return Ok(Recommendation { plans: vec![], dropped: vec![], selection: None, epsilon_cap: cap });
    }
    let taints = env.catalog.role_taints(&a.role);
    let input = EnumerateInput {
        annotated: &a.annotated,
        regions: &a.regions,
        catalog: &env.catalog,
        taints: &taints,
        registry: &env.registry,
        tables: Some(&env.tables),
        budget_remaining: cap,
        seed,
    };
    let mut e = enumerate(&input);
    env.cost_model.estimate_all(&mut e.plans);
    let selection = crate::optimizer::select(&e.plans, cap, constraints)?;
    Ok(Recommendation { plans: e.plans, dropped: e.dropped, selection: Some(selection), epsilon_cap: cap })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Realized {
    pub plan_ids: Vec<String>,
    pub ir: IrGraph,
    pub models: Vec<MaterializeOutcome>,
}

/// Trains the models the plans need (reusing cached ones) and splices
/// every plan into the base IR.
pub fn realize(env: &mut Environment, a: &Analysis, plans: &[&CandidatePlan]) -> Result<Realized, WorkflowError> {
    let mut models = Vec::new();
    for p in plans {
        if let ModelBinding::Train(req) = &p.model_binding {
            models.push(materialize(req, &env.tables, &env.functions, &mut env.registry)?);
        }
    }
    let specs: Vec<_> = plans.iter().map(|p| &p.spec).collect();
    let ir = if specs.is_empty() { a.ir.clone() } else { apply_all(&a.ir, &specs)? };
    Ok(Realized { plan_ids: plans.iter().map(|p| p.plan_id.clone()).collect(), ir, models })
}

/// Debits the ledger and evaluates; nothing is read if the debit fails.
pub fn run(env: &mut Environment, ir: &IrGraph, user: &str, plan_id: &str) -> Result<(Table, ExecutionReceipt), WorkflowError> {
    let ctx = ExecContext { tables: &env.tables, functions: &env.functions, registry: &env.registry };
    Ok(execute(ir, ctx, &mut env.catalog.ledger, user, plan_id)?)
}

/// Joined id for a multi-region choice.
pub fn choice_id(plan_ids: &[String]) -> String {
    plan_ids.join("+")
}
