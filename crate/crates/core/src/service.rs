//! Transport-agnostic service: workflow sessions, their state machine,
//! and the persisted stores behind them.
//!
//! Every mutating call persists the stores it touched before returning,
//! each as one JSON document replaced by atomic rename. Reopening a data
//! directory therefore reproduces every read-only response.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value as Json};

use crate::catalog::{CatalogError, RowPredicate, SchemaListing};
use crate::exec::{ExecError, ExecutionReceipt, Table};
use crate::ir::IrGraph;
use crate::learn::ModelRegistry;
use crate::optimizer::{Constraints, CostVector, FeedbackRecord, OptimizerError};
use crate::rewrite::DroppedPlan;
use crate::scenario::{self, ScenarioError};
use crate::taint::SensitiveRegion;
use crate::workflow::{self, choice_id, Analysis, Environment, Recommendation, WorkflowError, BASELINE_PLAN};

/// Rows shown per relation by `GET /catalog`.
pub const CATALOG_SAMPLE_ROWS: usize = 5;

/// Error with an HTTP status and a stable machine-readable code.
#[derive(Debug, Clone, PartialEq, Serialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ServiceError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    pub detail: Json,
}

impl ServiceError {
    pub fn new(status: u16, code: &str, message: impl Into<String>) -> Self {
        ServiceError { status, code: code.into(), message: message.into(), detail: Json::Null }
    }

    fn with(mut self, detail: Json) -> Self {
        self.detail = detail;
        self
    }

    fn conflict(message: impl Into<String>) -> Self {
        ServiceError::new(409, "invalid_state", message)
    }
}

impl From<CatalogError> for ServiceError {
    fn from(e: CatalogError) -> Self {
        let m = e.to_string();
        match e {
            CatalogError::VersionConflict { expected, current } => {
                ServiceError::new(409, "version_conflict", m).with(json!({"expected": expected, "current": current}))
            }
            CatalogError::InsufficientBudget { holder, requested, remaining } => ServiceError::new(402, "insufficient_budget", m)
                .with(json!({"holder": holder, "requested": requested, "remaining": remaining})),
            CatalogError::UnknownRole(_) => ServiceError::new(404, "unknown_role", m),
            CatalogError::UnknownUser(_) => ServiceError::new(404, "unknown_user", m),
            CatalogError::UnknownDataset(_) | CatalogError::UnknownRelation(_) => ServiceError::new(404, "unknown_relation", m),
            _ => ServiceError::new(400, "invalid_request", m),
        }
    }
}

impl From<WorkflowError> for ServiceError {
    fn from(e: WorkflowError) -> Self {
        let m = e.to_string();
        match e {
            WorkflowError::Frontend(f) => {
                let (line, column) = f.position();
                let code = match f {
                    crate::frontend::FrontendError::Syntax { .. } => "syntax_error",
                    crate::frontend::FrontendError::Semantic { .. } => "semantic_error",
                };
                ServiceError::new(400, code, m).with(json!({"line": line, "column": column}))
            }
            WorkflowError::Lowering(_) => ServiceError::new(400, "semantic_error", m),
            WorkflowError::Taint(_) => ServiceError::new(400, "semantic_error", m),
            WorkflowError::Catalog(c) => c.into(),
            WorkflowError::Optimizer(OptimizerError::NoFeasiblePlan(_)) => ServiceError::new(409, "no_feasible_plan", m),
            WorkflowError::Optimizer(OptimizerError::UnknownPlan(_)) => ServiceError::new(404, "unknown_plan", m),
            WorkflowError::Rewrite(_) => ServiceError::new(500, "rewrite_failed", m),
            WorkflowError::Exec(ExecError::Budget(c)) => c.into(),
            WorkflowError::Exec(_) => ServiceError::new(500, "execution_failed", m),
            WorkflowError::UnknownRole(_) => ServiceError::new(404, "unknown_role", m),
            WorkflowError::Forbidden { limit, .. } => ServiceError::new(403, "forbidden", m).with(json!({"limit": limit})),
        }
    }
}

impl From<ScenarioError> for ServiceError {
    fn from(e: ScenarioError) -> Self {
        ServiceError::new(500, "scenario_error", e.to_string())
    }
}

fn io_error(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::new(500, "storage_error", e.to_string())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Annotated,
    Analyzed,
    Recommended,
    Selected,
    Executed,
    Feedback,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectedPlan {
    pub plan_id: String,
    pub plan_ids: Vec<String>,
    pub model_ids: Vec<String>,
    pub ir: IrGraph,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkflowSession {
    pub session_id: String,
    pub user: String,
    pub role: String,
    pub stage: Stage,
    pub query: String,
    pub analysis: Analysis,
    pub recommendation: Option<Recommendation>,
    pub selected: Option<SelectedPlan>,
    pub receipts: Vec<ExecutionReceipt>,
}

/// What feedback on an executed plan is attributed to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutedPlan {
    pub scheme: String,
    pub task_key: String,
    pub epsilon: f64,
    pub training_rows: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
struct SessionStore {
    next_id: u64,
    sessions: BTreeMap<String, WorkflowSession>,
    /// Choice id → its component plans.
    executed: BTreeMap<String, Vec<ExecutedPlan>>,
}

// Requests and responses -----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateRequest {
    pub relation: String,
    pub attributes: Vec<String>,
    #[serde(default)]
    pub tuple_predicate: Option<RowPredicate>,
    /// Default max ε per role for queries touching these attributes.
    #[serde(default)]
    pub per_role_epsilon: BTreeMap<String, f64>,
    #[serde(default)]
    pub expected_version: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateResponse {
    pub version: u64,
    pub changed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeRequest {
    pub sql: String,
    pub user: String,
    pub role: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeResponse {
    pub session_id: String,
    pub ir_json: IrGraph,
    pub dot: String,
    pub regions: Vec<SensitiveRegion>,
    pub needs_protection: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendRequest {
    pub session: String,
    #[serde(default)]
    pub constraints: Option<Constraints>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPlan {
    pub rank: usize,
    pub plan_id: String,
    pub plan_ids: Vec<String>,
    pub schemes: Vec<String>,
    pub cost: CostVector,
    pub score: f64,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendResponse {
    pub session_id: String,
    pub no_protection_needed: bool,
    pub epsilon_cap: f64,
    pub top_k: Vec<RankedPlan>,
    pub candidates: usize,
    pub dropped: Vec<DroppedPlan>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectRequest {
    pub session: String,
    pub plan_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub model_id: String,
    pub cached: bool,
    pub epsilon: Option<f64>,
    pub training_rows: u64,
    pub training_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectResponse {
    pub session_id: String,
    pub plan_id: String,
    pub models: Vec<TrainedModel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecuteRequest {
    pub session: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecuteResponse {
    pub session_id: String,
    pub rows: Table,
    pub receipt: ExecutionReceipt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRequest {
    pub plan_id: String,
    #[serde(default)]
    pub latency_ms: Option<f64>,
    #[serde(default)]
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackResponse {
    pub plan_id: String,
    pub recorded: usize,
    /// Expected accuracy of each component scheme after the update.
    pub expected_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetResponse {
    pub user: String,
    pub user_remaining: f64,
    pub dataset: Option<String>,
    pub dataset_remaining: Option<f64>,
    pub debits: usize,
}

// ---------------------------------------------------------------------------

pub struct Service {
    env: Environment,
    store: SessionStore,
    state_dir: Option<PathBuf>,
    /// Used when a recommend request carries no constraints.
    defaults: Constraints,
    scenario: Option<scenario::ScenarioFile>,
}

const SCENARIO_DIR: &str = "scenario";
const STATE_DIR: &str = "state";

impl Service {
    /// In-memory service without persistence.
    pub fn in_memory(env: Environment, defaults: Constraints) -> Self {
        Service { env, store: SessionStore::default(), state_dir: None, defaults, scenario: None }
    }

    /// Seeds `data_dir` with a scenario bundle if it has none yet, then
    /// opens it. `scenario` is a bundle directory or a bundled name.
    pub fn init(data_dir: &Path, scenario: &str, fixtures_root: Option<&Path>) -> Result<Self, ServiceError> {
        let bundle = data_dir.join(SCENARIO_DIR);
        if !bundle.join("scenario.json").exists() {
            let src = Path::new(scenario);
            let src = if src.join("scenario.json").exists() {
                Some(src.to_path_buf())
            } else {
                fixtures_root.map(|r| r.join(scenario)).filter(|d| d.join("scenario.json").exists())
            };
            let (s, tables) = match src {
                Some(d) => {
                    let (s, ts) = scenario::read_bundle(&d)?;
                    let tables = s.tables.iter().filter_map(|t| ts.peek(&t.relation).map(|x| (t.relation.clone(), x.clone()))).collect();
                    (s, tables)
                }
                None => scenario::generate(scenario).ok_or_else(|| ServiceError::new(404, "unknown_scenario", format!("unknown scenario '{scenario}'")))?,
            };
            scenario::write_bundle(&bundle, &s, &tables)?;
        }
        Self::open(data_dir)
    }

    /// Opens a seeded data directory, restoring persisted stores.
    pub fn open(data_dir: &Path) -> Result<Self, ServiceError> {
        let (s, tables) = scenario::read_bundle(&data_dir.join(SCENARIO_DIR))?;
        let state = data_dir.join(STATE_DIR);
        let restored = state.join("catalog.json").exists();
        let mut env = scenario::instantiate(&s, tables)?;
        let mut store = SessionStore::default();
        if restored {
            env.catalog = crate::persist::read_json(&state.join("catalog.json")).map_err(io_error)?.unwrap_or(env.catalog);
            env.cost_model = crate::persist::read_json(&state.join("cost_model.json")).map_err(io_error)?.unwrap_or(env.cost_model);
            store = crate::persist::read_json(&state.join("sessions.json")).map_err(io_error)?.unwrap_or_default();
            if state.join("models").join("index.json").exists() {
                env.registry = ModelRegistry::load_dir(&state.join("models")).map_err(io_error)?;
            }
        }
        let svc = Service { env, store, state_dir: Some(state), defaults: s.constraints.clone(), scenario: Some(s) };
        if !restored {
            svc.persist(&[Store::Catalog, Store::Sessions, Store::CostModel, Store::Models])?;
        }
        Ok(svc)
    }

    pub fn env(&self) -> &Environment {
        &self.env
    }

    pub fn default_constraints(&self) -> &Constraints {
        &self.defaults
    }

    /// The bundle the data directory was seeded from.
    pub fn scenario(&self) -> Option<&scenario::ScenarioFile> {
        self.scenario.as_ref()
    }

    /// Role of a scenario user.
    pub fn role_of(&self, user: &str) -> Option<&str> {
        self.scenario.as_ref()?.users.iter().find(|u| u.name == user).map(|u| u.role.as_str())
    }

    pub fn session(&self, id: &str) -> Result<&WorkflowSession, ServiceError> {
        self.store.sessions.get(id).ok_or_else(|| ServiceError::new(404, "unknown_session", format!("unknown session '{id}'")))
    }

    fn session_mut(&mut self, id: &str) -> Result<&mut WorkflowSession, ServiceError> {
        self.store.sessions.get_mut(id).ok_or_else(|| ServiceError::new(404, "unknown_session", format!("unknown session '{id}'")))
    }

    fn persist(&self, stores: &[Store]) -> Result<(), ServiceError> {
        let Some(dir) = &self.state_dir else { return Ok(()) };
        for s in stores {
            match s {
                Store::Catalog => crate::persist::write_json_atomic(&dir.join("catalog.json"), &self.env.catalog).map_err(io_error)?,
                Store::Sessions => crate::persist::write_json_atomic(&dir.join("sessions.json"), &self.store).map_err(io_error)?,
                Store::CostModel => crate::persist::write_json_atomic(&dir.join("cost_model.json"), &self.env.cost_model).map_err(io_error)?,
                Store::Models => self.env.registry.save_dir(&dir.join("models")).map_err(io_error)?,
            }
        }
        Ok(())
    }

    // Read-only ------------------------------------------------------------

    pub fn catalog(&self, role: &str) -> Result<SchemaListing, ServiceError> {
        if !self.env.catalog.known_roles().contains(role) {
            return Err(ServiceError::new(404, "unknown_role", format!("unknown role '{role}'")));
        }
        Ok(self.env.catalog.describe(role, Some(&self.env.tables), CATALOG_SAMPLE_ROWS)?)
    }

    pub fn budget(&self, user: &str, dataset: Option<&str>) -> Result<BudgetResponse, ServiceError> {
        let ledger = &self.env.catalog.ledger;
        let user_remaining = ledger.user_remaining(user).ok_or_else(|| CatalogError::UnknownUser(user.to_string()))?;
        let dataset_remaining = match dataset {
            Some(d) => Some(ledger.dataset_remaining(d).ok_or_else(|| CatalogError::UnknownDataset(d.to_string()))?),
            None => None,
        };
        let debits = ledger.debit_log.iter().filter(|d| d.user == user && dataset.is_none_or(|x| d.dataset == x)).count();
        Ok(BudgetResponse { user: user.to_string(), user_remaining, dataset: dataset.map(str::to_string), dataset_remaining, debits })
    }

    // Mutating -------------------------------------------------------------

    /// Global catalog annotation. Repeating an applied annotation succeeds
    /// without bumping the version.
    pub fn annotate(&mut self, req: AnnotateRequest) -> Result<AnnotateResponse, ServiceError> {
        let changed = self.env.catalog.annotate_taint_checked(
            req.expected_version,
            &req.relation,
            &req.attributes,
            req.tuple_predicate,
            &req.per_role_epsilon,
        )?;
        if changed {
            self.persist(&[Store::Catalog])?;
        }
        Ok(AnnotateResponse { version: self.env.catalog.version, changed })
    }

    pub fn analyze(&mut self, req: AnalyzeRequest) -> Result<AnalyzeResponse, ServiceError> {
        let a = workflow::analyze(&self.env.catalog, Some(&self.env.tables), &req.sql, &req.user, &req.role)?;
        self.env.catalog.ledger.user_remaining(&req.user).ok_or_else(|| CatalogError::UnknownUser(req.user.clone()))?;
        self.store.next_id += 1;
        let id = format!("s{}", self.store.next_id);
        let resp = AnalyzeResponse {
            session_id: id.clone(),
            ir_json: a.annotated.clone(),
            dot: a.dot.clone(),
            regions: a.regions.clone(),
            needs_protection: a.needs_protection(),
        };
        let session = WorkflowSession {
            session_id: id.clone(),
            user: req.user,
            role: req.role,
            stage: Stage::Analyzed,
            query: req.sql,
            analysis: a,
            recommendation: None,
            selected: None,
            receipts: vec![],
        };
        self.store.sessions.insert(id, session);
        self.persist(&[Store::Sessions])?;
        Ok(resp)
    }

    pub fn recommend(&mut self, req: RecommendRequest) -> Result<RecommendResponse, ServiceError> {
        let s = self.session(&req.session)?;
        if !matches!(s.stage, Stage::Analyzed | Stage::Recommended) {
            return Err(ServiceError::conflict(format!("session {} is {:?}; recommend needs an analyzed query", s.session_id, s.stage)));
        }
        let constraints = req.constraints.unwrap_or_else(|| self.defaults.clone());
        let rec = workflow::recommend(&self.env, &s.analysis, &constraints, req.seed)?;
        let resp = recommend_response(&req.session, &rec);
        let s = self.session_mut(&req.session)?;
        s.recommendation = Some(rec);
        s.stage = Stage::Recommended;
        self.persist(&[Store::Sessions])?;
        Ok(resp)
    }

    /// Selects a recommended plan and trains what it needs before
    /// returning.
    pub fn select(&mut self, req: SelectRequest) -> Result<SelectResponse, ServiceError> {
        let s = self.session(&req.session)?;
        if !matches!(s.stage, Stage::Recommended | Stage::Selected) {
            return Err(ServiceError::conflict(format!("session {} is {:?}; select needs a recommendation", s.session_id, s.stage)));
        }
        let rec = s.recommendation.as_ref().expect("recommended stage has a recommendation");
        let plan_ids = resolve_plan(rec, &req.plan_id)?;
        let analysis = s.analysis.clone();
        let plans: Vec<_> = plan_ids.iter().map(|id| rec.plan(id).cloned().expect("resolved")).collect();
        let refs: Vec<_> = plans.iter().collect();
        let realized = workflow::realize(&mut self.env, &analysis, &refs)?;
        let models: Vec<TrainedModel> = realized
            .models
            .iter()
            .map(|m| TrainedModel {
                model_id: m.artifact_id.clone(),
                cached: m.cached,
                epsilon: m.report.as_ref().map(|r| r.epsilon),
                training_rows: m.training_rows as u64,
                training_accuracy: m.training_accuracy,
            })
            .collect();
        let model_ids = plans.iter().filter_map(|p| p.model_binding.artifact_id().map(str::to_string)).collect();
        let plan_id = if plan_ids.is_empty() { BASELINE_PLAN.to_string() } else { choice_id(&plan_ids) };
        let s = self.session_mut(&req.session)?;
        s.selected = Some(SelectedPlan { plan_id: plan_id.clone(), plan_ids, model_ids, ir: realized.ir });
        s.stage = Stage::Selected;
        self.persist(&[Store::Models, Store::Sessions])?;
        Ok(SelectResponse { session_id: req.session, plan_id, models })
    }

    /// Charges the selected plan's ε and runs it. A failed debit reads
    /// nothing and changes nothing.
    pub fn execute(&mut self, req: ExecuteRequest) -> Result<ExecuteResponse, ServiceError> {
        let s = self.session(&req.session)?;
        if s.stage < Stage::Selected {
            return Err(ServiceError::conflict(format!("session {} is {:?}; execute needs a selected plan", s.session_id, s.stage)));
        }
        let sel = s.selected.clone().expect("selected stage has a plan");
        let user = s.user.clone();
        let executed: Vec<ExecutedPlan> = {
            let rec = s.recommendation.as_ref().expect("recommended");
            sel.plan_ids
                .iter()
                .filter_map(|id| rec.plan(id))
                .map(|p| ExecutedPlan { scheme: p.scheme.clone(), task_key: p.task_key.clone(), epsilon: p.epsilon, training_rows: p.training_rows })
                .collect()
        };
        let (rows, receipt) = workflow::run(&mut self.env, &sel.ir, &user, &sel.plan_id)?;
        self.store.executed.insert(sel.plan_id.clone(), executed);
        let s = self.session_mut(&req.session)?;
        s.receipts.push(receipt.clone());
        if s.stage < Stage::Executed {
            s.stage = Stage::Executed;
        }
        self.persist(&[Store::Catalog, Store::Sessions])?;
        Ok(ExecuteResponse { session_id: req.session, rows, receipt })
    }

    /// Folds observed accuracy and latency into the cost model. Only plans
    /// that have been executed accept feedback.
    pub fn feedback(&mut self, req: FeedbackRequest) -> Result<FeedbackResponse, ServiceError> {
        let Some(parts) = self.store.executed.get(&req.plan_id).cloned() else {
            return Err(ServiceError::new(409, "not_executed", format!("plan '{}' has not been executed", req.plan_id)));
        };
        for (name, v) in [("accuracy", req.accuracy), ("latency_ms", req.latency_ms)] {
            if v.is_some_and(|x| !x.is_finite() || x < 0.0 || (name == "accuracy" && x > 1.0)) {
                return Err(ServiceError::new(400, "invalid_request", format!("{name} out of range")));
            }
        }
        let share = req.latency_ms.map(|l| l / parts.len().max(1) as f64);
        for p in &parts {
            self.env.cost_model.record(FeedbackRecord {
                plan_id: req.plan_id.clone(),
                scheme: p.scheme.clone(),
                task_key: p.task_key.clone(),
                epsilon: p.epsilon,
                accuracy: req.accuracy,
                latency_ms: share,
                training_rows: p.training_rows,
            });
        }
        let expected_accuracy = parts.iter().map(|p| self.env.cost_model.expected_accuracy(&p.scheme, &p.task_key, p.epsilon)).collect();
        let touched: BTreeSet<&str> = self
            .store
            .sessions
            .values()
            .filter(|s| s.selected.as_ref().is_some_and(|x| x.plan_id == req.plan_id))
            .map(|s| s.session_id.as_str())
            .collect();
        let touched: Vec<String> = touched.into_iter().map(str::to_string).collect();
        for id in touched {
            let s = self.session_mut(&id)?;
            s.stage = Stage::Feedback;
        }
        self.persist(&[Store::CostModel, Store::Sessions])?;
        Ok(FeedbackResponse { plan_id: req.plan_id, recorded: parts.len(), expected_accuracy })
    }
}

#[derive(Clone, Copy)]
enum Store {
    Catalog,
    Sessions,
    CostModel,
    Models,
}

/// A top-k choice id, a single-region plan id, or `baseline` for a query
/// that needs no protection.
fn resolve_plan(rec: &Recommendation, id: &str) -> Result<Vec<String>, ServiceError> {
    let unknown = || ServiceError::new(404, "unknown_plan", format!("unknown plan '{id}'"));
    let Some(sel) = &rec.selection else {
        return if id == BASELINE_PLAN { Ok(vec![]) } else { Err(unknown()) };
    };
    if let Some(c) = sel.top_k.iter().chain(std::iter::once(&sel.chosen)).find(|c| choice_id(&c.plan_ids) == id) {
        return Ok(c.plan_ids.clone());
    }
    let regions: BTreeSet<_> = rec.plans.iter().map(|p| p.region_root).collect();
    match rec.plan(id) {
        Some(p) if regions.len() == 1 && p.cost.is_some() && p.epsilon <= rec.epsilon_cap + 1e-12 => Ok(vec![p.plan_id.clone()]),
        _ => Err(unknown()),
    }
}

pub fn recommend_response(session: &str, rec: &Recommendation) -> RecommendResponse {
    let top_k = match &rec.selection {
        None => vec![],
        Some(sel) => sel
            .top_k
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let parts: Vec<_> = c.plan_ids.iter().filter_map(|id| rec.plan(id)).collect();
                RankedPlan {
                    rank: i + 1,
                    plan_id: choice_id(&c.plan_ids),
                    plan_ids: c.plan_ids.clone(),
                    schemes: parts.iter().map(|p| p.scheme.clone()).collect(),
                    cost: c.cost,
                    score: c.score,
                    explanation: parts.iter().map(|p| p.explanation.as_str()).collect::<Vec<_>>().join("; "),
                }
            })
            .collect(),
    };
    RecommendResponse {
        session_id: session.to_string(),
        no_protection_needed: rec.selection.is_none(),
        epsilon_cap: rec.epsilon_cap,
        top_k,
        candidates: rec.plans.len(),
        dropped: rec.dropped.clone(),
    }
}
