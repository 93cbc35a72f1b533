//! Cost estimation, Pareto filtering and plan selection.
//!
//! Every candidate gets a cost vector `(ε, Δacc, latency)`. Accuracy comes
//! from a per-(scheme, task) curve tabulated on [`CURVE_GRID`], seeded with
//! priors and corrected by feedback (EMA at the observed point, then a
//! pool-adjacent-violators repair so the curve stays nondecreasing in ε).
//! Latency is a per-scheme recursive least-squares fit on the training-set
//! cardinality; training time is amortized over [`AMORTIZE_QUERIES`] runs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::frontend::AggFunc;
use crate::ir::NodeKind;
use crate::rewrite::{CandidatePlan, ModelBinding, TrainingMethod};

pub const FEEDBACK_EMA: f64 = 0.3;
pub const AMORTIZE_QUERIES: f64 = 10.0;
pub const DEFAULT_TOP_K: usize = 3;
/// Finite ε points of the accuracy tables; one more entry holds the value
/// at ε = ∞.
pub const CURVE_GRID: [f64; 7] = [0.5, 1.0, 2.0, 4.0, 6.0, 8.0, 16.0];
pub const CURVE_POINTS: usize = CURVE_GRID.len() + 1;
pub const KNN_ACCURACY_OFFSET: f64 = 0.05;
const PRIOR_FLOOR: f64 = 0.5;
const PRIOR_CEILING: f64 = 0.95;
const PRIOR_SCALE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostVector {
    pub epsilon: f64,
    /// Expected accuracy drop (relative error for numeric answers), in [0, 1].
    pub acc_drop: f64,
    /// Inference plus amortized training.
    pub latency_ms: f64,
}

impl CostVector {
    pub const ZERO: CostVector = CostVector { epsilon: 0.0, acc_drop: 0.0, latency_ms: 0.0 };

    /// Weakly better in every coordinate and strictly better in one.
    pub fn dominates(&self, o: &CostVector) -> bool {
        let le = self.epsilon <= o.epsilon && self.acc_drop <= o.acc_drop && self.latency_ms <= o.latency_ms;
        let lt = self.epsilon < o.epsilon || self.acc_drop < o.acc_drop || self.latency_ms < o.latency_ms;
        le && lt
    }

    /// Cost of running two independently rewritten regions in one query:
    /// ε and latency add, accuracies multiply.
    pub fn combine(&self, o: &CostVector) -> CostVector {
        CostVector {
            epsilon: self.epsilon + o.epsilon,
            acc_drop: 1.0 - (1.0 - self.acc_drop) * (1.0 - o.acc_drop),
            latency_ms: self.latency_ms + o.latency_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Weights {
    pub epsilon: f64,
    pub accuracy: f64,
    pub latency: f64,
}

impl Default for Weights {
    fn default() -> Self {
        Weights { epsilon: 1.0, accuracy: 10.0, latency: 0.001 }
    }
}

impl Weights {
    pub fn scalarize(&self, c: &CostVector) -> f64 {
        self.epsilon * c.epsilon + self.accuracy * c.acc_drop + self.latency * c.latency_ms
    }
}

/// User-side limits on a recommendation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    #[serde(default)]
    pub max_epsilon: Option<f64>,
    #[serde(default)]
    pub min_accuracy: Option<f64>,
    #[serde(default)]
    pub max_latency_ms: Option<f64>,
    #[serde(default)]
    pub weights: Weights,
    #[serde(default = "default_k")]
    pub k: usize,
    /// Scheme families allowed (e.g. `S1:transfer`); empty allows all.
    #[serde(default)]
    pub schemes: Vec<String>,
}

fn default_k() -> usize {
    DEFAULT_TOP_K
}

impl Default for Constraints {
    fn default() -> Self {
        Constraints { max_epsilon: None, min_accuracy: None, max_latency_ms: None, weights: Weights::default(), k: DEFAULT_TOP_K, schemes: vec![] }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum OptimizerError {
    #[error("no feasible plan: {0}")]
    NoFeasiblePlan(String),
    #[error("unknown plan '{0}'")]
    UnknownPlan(String),
}

/// Accuracy table aligned with [`CURVE_GRID`] plus the ∞ point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyCurve {
    pub values: Vec<f64>,
    /// Observations folded into each point.
    pub counts: Vec<u64>,
}

impl AccuracyCurve {
    pub fn from_fn(f: impl Fn(f64) -> f64) -> Self {
        let mut values: Vec<f64> = CURVE_GRID.iter().map(|&e| f(e)).collect();
        values.push(f(f64::INFINITY));
        AccuracyCurve { values: isotonic(&values, &[1.0; CURVE_POINTS]), counts: vec![0; CURVE_POINTS] }
    }

    /// Piecewise-linear in ε between grid points; beyond the last finite
    /// point it approaches the ∞ value as `1 − 16/ε`.
    pub fn at(&self, eps: f64) -> f64 {
        let g = &CURVE_GRID;
        let last = g.len() - 1;
        if eps <= g[0] {
            return self.values[0];
        }
        if eps >= g[last] {
            let t = if eps.is_infinite() { 1.0 } else { 1.0 - g[last] / eps };
            return self.values[last] + t * (self.values[last + 1] - self.values[last]);
        }
        let i = g.iter().position(|&x| x > eps).expect("inside grid") - 1;
        let t = (eps - g[i]) / (g[i + 1] - g[i]);
        self.values[i] + t * (self.values[i + 1] - self.values[i])
    }

    /// Grid point an observation at `eps` updates (nearest in log ε; ε above
    /// twice the last finite point counts as ∞).
    pub fn slot(eps: f64) -> usize {
        let last = CURVE_GRID[CURVE_GRID.len() - 1];
        if eps > 2.0 * last {
            return CURVE_POINTS - 1;
        }
        let l = eps.max(1e-12).ln();
        (0..CURVE_GRID.len())
            .min_by(|&a, &b| (CURVE_GRID[a].ln() - l).abs().total_cmp(&(CURVE_GRID[b].ln() - l).abs()))
            .expect("grid nonempty")
    }

    pub fn observe(&mut self, eps: f64, accuracy: f64) {
        let s = Self::slot(eps);
        self.values[s] = (1.0 - FEEDBACK_EMA) * self.values[s] + FEEDBACK_EMA * accuracy.clamp(0.0, 1.0);
        self.counts[s] += 1;
        self.values = isotonic(&self.values, &[1.0; CURVE_POINTS]);
    }

    pub fn is_monotone(&self) -> bool {
        self.values.windows(2).all(|w| w[0] <= w[1])
    }
}

/// Default accuracy-vs-ε prior: 0.5 at the smallest grid point rising
/// towards 0.95.
pub fn default_prior(eps: f64) -> f64 {
    PRIOR_CEILING - (PRIOR_CEILING - PRIOR_FLOOR) * (-(eps - CURVE_GRID[0]).max(0.0) / PRIOR_SCALE).exp()
}

/// Two-parameter recursive least squares, `y ≈ w₀ + w₁·x`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rls {
    pub w: [f64; 2],
    pub p: [[f64; 2]; 2],
    pub n: u64,
}

impl Default for Rls {
    fn default() -> Self {
        Rls { w: [0.0; 2], p: [[1e6, 0.0], [0.0, 1e6]], n: 0 }
    }
}

impl Rls {
    pub fn update(&mut self, x: f64, y: f64) {
        let phi = [1.0, x];
        let pphi = [self.p[0][0] * phi[0] + self.p[0][1] * phi[1], self.p[1][0] * phi[0] + self.p[1][1] * phi[1]];
        let denom = 1.0 + phi[0] * pphi[0] + phi[1] * pphi[1];
        let k = [pphi[0] / denom, pphi[1] / denom];
        let err = y - (self.w[0] * phi[0] + self.w[1] * phi[1]);
        self.w[0] += k[0] * err;
        self.w[1] += k[1] * err;
        for (i, ki) in k.iter().enumerate() {
            for (j, pj) in pphi.iter().enumerate() {
                self.p[i][j] -= ki * pj;
            }
        }
        self.n += 1;
    }

    pub fn predict(&self, x: f64) -> f64 {
        self.w[0] + self.w[1] * x
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub plan_id: String,
    pub scheme: String,
    pub task_key: String,
    pub epsilon: f64,
    pub accuracy: Option<f64>,
    pub latency_ms: Option<f64>,
    pub training_rows: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    /// `"scheme|task_key"` → accuracy table. Missing keys use priors.
    pub curves: BTreeMap<String, AccuracyCurve>,
    /// scheme → latency fit on training rows (thousands).
    pub latency: BTreeMap<String, Rls>,
    pub log: Vec<FeedbackRecord>,
}

/// Pool-adjacent-violators: weighted least-squares nondecreasing fit.
pub fn isotonic(values: &[f64], weights: &[f64]) -> Vec<f64> {
    let mut blocks: Vec<(f64, f64, usize)> = Vec::new(); // (mean, weight, len)
    for (&v, &w) in values.iter().zip(weights) {
        blocks.push((v, w, 1));
        while blocks.len() > 1 && blocks[blocks.len() - 2].0 > blocks[blocks.len() - 1].0 {
            let (m2, w2, l2) = blocks.pop().expect("len > 1");
            let (m1, w1, l1) = blocks.pop().expect("len > 1");
            let w = w1 + w2;
            blocks.push(((m1 * w1 + m2 * w2) / w, w, l1 + l2));
        }
    }
    blocks.into_iter().flat_map(|(m, _, l)| std::iter::repeat(m).take(l)).collect()
}

pub fn curve_key(scheme: &str, task_key: &str) -> String {
    format!("{scheme}|{task_key}")
}

impl CostModel {
    /// The table for a scheme/task pair, or its prior.
    pub fn curve(&self, scheme: &str, task_key: &str) -> AccuracyCurve {
        if let Some(c) = self.curves.get(&curve_key(scheme, task_key)) {
            return c.clone();
        }
        if scheme.starts_with("S3") {
            AccuracyCurve::from_fn(|e| (default_prior(e) - KNN_ACCURACY_OFFSET).max(0.0))
        } else {
            AccuracyCurve::from_fn(default_prior)
        }
    }

    pub fn set_curve(&mut self, scheme: &str, task_key: &str, curve: AccuracyCurve) {
        self.curves.insert(curve_key(scheme, task_key), curve);
    }

    pub fn expected_accuracy(&self, scheme: &str, task_key: &str, epsilon: f64) -> f64 {
        self.curve(scheme, task_key).at(epsilon)
    }

    /// Folds one observation in and appends it to the log.
    pub fn record(&mut self, r: FeedbackRecord) {
        if let Some(a) = r.accuracy.filter(|a| a.is_finite()) {
            let mut c = self.curve(&r.scheme, &r.task_key);
            c.observe(r.epsilon, a);
            self.curves.insert(curve_key(&r.scheme, &r.task_key), c);
        }
        if let Some(l) = r.latency_ms.filter(|l| l.is_finite() && *l >= 0.0) {
            self.latency.entry(r.scheme.clone()).or_default().update(r.training_rows as f64 / 1000.0, l);
        }
        self.log.push(r);
    }

    fn expected_latency(&self, scheme: &str, training_rows: u64, train_prior_ms: f64, exec_prior_ms: f64) -> f64 {
        match self.latency.get(scheme) {
            Some(r) if r.n >= 2 => r.predict(training_rows as f64 / 1000.0).max(0.0),
            _ => exec_prior_ms + train_prior_ms / AMORTIZE_QUERIES,
        }
    }

    pub fn estimate(&self, plan: &CandidatePlan) -> CostVector {
        let acc_drop = if plan.scheme.starts_with("S4") && !self.curves.contains_key(&curve_key(&plan.scheme, &plan.task_key)) {
            laplace_relative_error(plan)
        } else {
            1.0 - self.expected_accuracy(&plan.scheme, &plan.task_key, plan.epsilon)
        };
        let rows = plan.training_rows as f64;
        let train_ms = match &plan.model_binding {
            ModelBinding::Train(r) => {
                let epoch = rows * 0.002;
                let steps = r.dpsgd.steps as f64;
                match &r.method {
                    TrainingMethod::Search { options, .. } => epoch * (steps + 4.0 * options.steps as f64),
                    TrainingMethod::Transfer { .. } => epoch * steps * 0.5,
                    TrainingMethod::Fixed { .. } => epoch * steps,
                }
            }
            _ => 0.0,
        };
        let scan_rows = scanned_rows(plan) as f64;
        let exec_ms = if plan.scheme.starts_with("S3") { 5.0 + scan_rows * 0.01 + rows * 0.05 } else { 5.0 + scan_rows * 0.01 };
        CostVector {
            epsilon: plan.epsilon,
            acc_drop: acc_drop.clamp(0.0, 1.0),
            latency_ms: self.expected_latency(&plan.scheme, plan.training_rows, train_ms, exec_ms),
        }
    }

    pub fn estimate_all(&self, plans: &mut [CandidatePlan]) {
        for p in plans.iter_mut() {
            p.cost = Some(self.estimate(p));
        }
    }
}

fn scanned_rows(plan: &CandidatePlan) -> u64 {
    plan.rewritten
        .nodes
        .iter()
        .filter_map(|n| match &n.kind {
            NodeKind::Scan { row_count, .. } => Some(*row_count),
            _ => None,
        })
        .sum()
}

/// Mean `E|noise| / |answer|` over the perturbed outputs, with the answer
/// magnitude taken from the cardinality estimate (COUNT) or half the clamp
/// bound per row (SUM, AVG).
pub fn laplace_relative_error(plan: &CandidatePlan) -> f64 {
    let rows = plan
        .rewritten
        .nodes
        .iter()
        .filter_map(|n| match &n.kind {
            NodeKind::Scan { row_count, .. } => Some(*row_count),
            _ => None,
        })
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let mut errs = Vec::new();
    for n in &plan.rewritten.nodes {
        if let NodeKind::NoisyAggregate { outputs, .. } = &n.kind {
            for o in outputs {
                // E|Lap(b)| = b
                let (noise, answer) = match o.func {
                    AggFunc::Count => (1.0 / o.epsilon, rows),
                    AggFunc::Sum => (o.bound / o.epsilon, rows * o.bound / 2.0),
                    // sum and count each get ε/2; first-order error of the ratio
                    _ => ((2.0 * o.bound / o.epsilon + 2.0 * o.bound / 2.0 / o.epsilon) / rows, o.bound / 2.0),
                };
                errs.push(noise / answer.max(1e-12));
            }
        }
    }
    if errs.is_empty() {
        0.0
    } else {
        errs.iter().sum::<f64>() / errs.len() as f64
    }
}

fn lex(a: &CostVector, b: &CostVector) -> std::cmp::Ordering {
    a.epsilon.total_cmp(&b.epsilon).then(a.latency_ms.total_cmp(&b.latency_ms)).then(a.acc_drop.total_cmp(&b.acc_drop))
}

/// Indices of the non-dominated vectors, ordered by (ε, latency, Δacc)
/// then index.
///
/// Candidates are swept in that order. A dominator never sorts after what
/// it dominates, so each candidate is checked against the front only.
pub fn pareto_front(costs: &[CostVector]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..costs.len()).collect();
    order.sort_by(|&a, &b| lex(&costs[a], &costs[b]).then(a.cmp(&b)));
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        if !front.iter().any(|&f| costs[f].dominates(&costs[i])) {
            front.push(i);
        }
    }
    front
}

/// A set of plans, one per sensitive region, with their combined cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanChoice {
    pub plan_ids: Vec<String>,
    pub cost: CostVector,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub chosen: PlanChoice,
    pub top_k: Vec<PlanChoice>,
}

/// Admissible ε for a query: the smallest of the remaining budgets and
/// the user's cap.
pub fn epsilon_cap(budget_remaining: f64, c: &Constraints) -> f64 {
    c.max_epsilon.map_or(budget_remaining, |m| m.min(budget_remaining))
}

fn admissible(cost: &CostVector, cap: f64, c: &Constraints) -> bool {
    cost.epsilon <= cap + 1e-12
        && c.min_accuracy.is_none_or(|a| 1.0 - cost.acc_drop >= a - 1e-12)
        && c.max_latency_ms.is_none_or(|l| cost.latency_ms <= l)
}

/// Picks one plan per region.
///
/// Regions are folded in one at a time. The state is the Pareto set of
/// partial combinations whose ε still fits the cap. Combination is
/// monotone in every coordinate, so a dominated partial combination can
/// never complete into a front member. The chosen set minimizes the
/// weighted objective; `top_k` lists the k best front members.
pub fn select(plans: &[CandidatePlan], budget_remaining: f64, c: &Constraints) -> Result<Selection, OptimizerError> {
    let cap = epsilon_cap(budget_remaining, c);
    let mut regions: BTreeMap<usize, Vec<&CandidatePlan>> = BTreeMap::new();
    for p in plans.iter().filter(|p| p.cost.is_some() && (c.schemes.is_empty() || c.schemes.contains(&p.scheme))) {
        regions.entry(p.region_root).or_default().push(p);
    }
    if regions.is_empty() {
        return Err(OptimizerError::NoFeasiblePlan("no candidate plans".into()));
    }
    let mut states: Vec<(Vec<String>, CostVector)> = vec![(vec![], CostVector::ZERO)];
    for (root, cands) in &regions {
        let mut next = Vec::new();
        for (ids, cost) in &states {
            for p in cands {
                let combined = cost.combine(&p.cost.expect("filtered"));
                if combined.epsilon <= cap + 1e-12 && c.max_latency_ms.is_none_or(|l| combined.latency_ms <= l) {
                    let mut ids = ids.clone();
                    ids.push(p.plan_id.clone());
                    next.push((ids, combined));
                }
            }
        }
        if next.is_empty() {
            return Err(OptimizerError::NoFeasiblePlan(format!("no plan for region #{root} fits ε ≤ {cap} and the constraints")));
        }
        let costs: Vec<CostVector> = next.iter().map(|(_, c)| *c).collect();
        states = pareto_front(&costs).into_iter().map(|i| next[i].clone()).collect();
    }
    let mut choices: Vec<PlanChoice> = states
        .into_iter()
        .filter(|(_, cost)| admissible(cost, cap, c))
        .map(|(plan_ids, cost)| PlanChoice { score: c.weights.scalarize(&cost), plan_ids, cost })
        .collect();
    if choices.is_empty() {
        return Err(OptimizerError::NoFeasiblePlan("no plan meets the accuracy constraint".into()));
    }
    choices.sort_by(|a, b| a.score.total_cmp(&b.score).then_with(|| a.plan_ids.cmp(&b.plan_ids)));
    let chosen = choices[0].clone();
    choices.truncate(c.k.max(1));
    Ok(Selection { chosen, top_k: choices })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cv(e: f64, a: f64, l: f64) -> CostVector {
        CostVector { epsilon: e, acc_drop: a, latency_ms: l }
    }

    #[test]
    fn dominance_is_strict() {
        assert!(cv(1.0, 0.1, 5.0).dominates(&cv(1.0, 0.2, 5.0)));
        assert!(!cv(1.0, 0.1, 5.0).dominates(&cv(1.0, 0.1, 5.0)));
        assert!(!cv(1.0, 0.3, 5.0).dominates(&cv(2.0, 0.1, 5.0)));
    }

    #[test]
    fn front_examples() {
        let c = vec![cv(1.0, 0.1, 10.0), cv(2.0, 0.05, 10.0), cv(2.0, 0.2, 20.0)];
        assert_eq!(pareto_front(&c), vec![0, 1]);
        let same = vec![cv(1.0, 0.2, 1.0); 3];
        assert_eq!(pareto_front(&same), vec![0, 1, 2]);
        assert_eq!(pareto_front(&[cv(3.0, 0.0, 0.0)]), vec![0]);
    }

    #[test]
    fn isotonic_pools_violations() {
        assert_eq!(isotonic(&[1.0, 3.0, 2.0, 4.0], &[1.0; 4]), vec![1.0, 2.5, 2.5, 4.0]);
        assert_eq!(isotonic(&[3.0, 2.0, 1.0], &[1.0; 3]), vec![2.0, 2.0, 2.0]);
    }

    #[test]
    fn rls_recovers_line() {
        let mut r = Rls::default();
        for x in 0..20 {
            r.update(x as f64, 3.0 + 2.0 * x as f64);
        }
        assert!((r.predict(10.0) - 23.0).abs() < 1e-3);
    }

    fn rec(a: f64) -> FeedbackRecord {
        FeedbackRecord {
            plan_id: "p".into(),
            scheme: "S1:scratch".into(),
            task_key: "f".into(),
            epsilon: 2.0,
            accuracy: Some(a),
            latency_ms: None,
            training_rows: 0,
        }
    }

    #[test]
    fn ema_update_arithmetic() {
        let mut m = CostModel::default();
        m.set_curve("S1:scratch", "f", AccuracyCurve::from_fn(|e| if e > 2.0 { 0.9 } else { 0.8 }));
        m.record(rec(0.9));
        assert!((m.expected_accuracy("S1:scratch", "f", 2.0) - 0.83).abs() < 1e-12);
        m.record(rec(0.83));
        assert!((m.expected_accuracy("S1:scratch", "f", 2.0) - 0.83).abs() < 1e-12);
    }

    #[test]
    fn update_above_next_point_is_pooled() {
        let mut m = CostModel::default();
        m.set_curve("S1:scratch", "f", AccuracyCurve::from_fn(|_| 0.8));
        m.record(rec(0.9));
        let c = m.curve("S1:scratch", "f");
        assert!(c.is_monotone());
        assert!(c.values[2] < 0.83 && c.values[2] > 0.8);
    }

    #[test]
    fn curve_interpolates_and_reaches_infinity() {
        let c = AccuracyCurve::from_fn(default_prior);
        assert!((c.at(0.5) - 0.5).abs() < 1e-12);
        assert!((c.at(f64::INFINITY) - 0.95).abs() < 1e-12);
        let mid = c.at(3.0);
        assert!(mid > c.at(2.0) && mid < c.at(4.0));
        assert_eq!(AccuracyCurve::slot(1e9), CURVE_POINTS - 1);
        assert_eq!(AccuracyCurve::slot(2.0), 2);
    }
}
