//! Reproducible scenario bundles: catalog, data files, queries, users and
//! constraints, plus the generators for the bundled fixtures.
//!
//! A bundle is a directory holding `scenario.json` and one CSV per
//! relation. [`generate`] rebuilds any bundled fixture from its seed, so
//! checked-in files can be regenerated and compared.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::catalog::{AttributeDescriptor, Catalog, FunctionSignature, RelationDescriptor, DEFAULT_DELTA};
use crate::dp::{calibrate_noise_multiplier, DpSgdConfig, NoiseRng};
use crate::exec::{ExecError, FunctionModels, Predictor, Table, TableError, TableSet};
use crate::learn::{FeatureEncoder, ModelArtifact, ModelRegistry};
use crate::optimizer::{AccuracyCurve, Constraints, CostModel, Weights};
use crate::rewrite::{materialize, signature_for, TrainingMethod, TrainingRequest, TrainingSource};
use crate::types::{fingerprint, Column, DataType, Task, Value};
pub use crate::workflow::Environment;

pub const BUNDLED: [&str; 4] = ["imdb_sentiment", "imdb_sweep", "alzheimers_care", "crossover"];

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("io error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("malformed scenario: {0}")]
    Format(String),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("pretraining '{id}' failed: {message}")]
    Pretrain { id: String, message: String },
    #[error("unknown scenario '{0}'")]
    Unknown(String),
}

/// Non-private implementation of a model-call function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BuiltinFunction {
    /// Counts lexicon hits; more positive than negative words gives the
    /// positive label.
    Lexicon { positive: Vec<String>, negative: Vec<String>, positive_label: String, negative_label: String },
    /// `above_label` when any input reaches its threshold.
    Threshold { thresholds: Vec<f64>, above_label: String, below_label: String },
}

impl Predictor for BuiltinFunction {
    fn predict(&self, inputs: &[Value]) -> Result<Vec<Vec<Value>>, ExecError> {
        let out = match self {
            BuiltinFunction::Lexicon { positive, negative, positive_label, negative_label } => {
                let text = inputs.first().map(|v| v.to_string()).unwrap_or_default().to_lowercase();
                let (mut p, mut n) = (0, 0);
                for w in text.split(|c: char| !c.is_alphanumeric()) {
                    p += positive.iter().filter(|x| *x == w).count();
                    n += negative.iter().filter(|x| *x == w).count();
                }
                if p > n { positive_label } else { negative_label }
            }
            BuiltinFunction::Threshold { thresholds, above_label, below_label } => {
                let hit = inputs.iter().zip(thresholds).any(|(v, t)| v.as_f64().is_some_and(|x| x >= *t));
                if hit { above_label } else { below_label }
            }
        };
        Ok(vec![vec![Value::text(out.clone())]])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionImpl {
    pub name: String,
    pub builtin: BuiltinFunction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSource {
    pub relation: String,
    /// CSV file relative to the bundle directory.
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSpec {
    pub name: String,
    pub role: String,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBudget {
    pub relation: String,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioQuery {
    pub name: String,
    pub sql: String,
    pub user: String,
}

/// Public random-projection encoder placed in the registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub id: String,
    pub input_type: DataType,
    pub dim: usize,
    pub seed: u64,
}

/// DP model trained at load time and registered for reuse or transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub id: String,
    pub function: String,
    /// Relation the model is trained on (may differ from the function's).
    pub relation: String,
    pub inputs: Vec<String>,
    pub label: String,
    pub epsilon: f64,
    pub hidden: Vec<usize>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSpec {
    pub scheme: String,
    pub task_key: String,
    /// Accuracy at 0.5, 1, 2, 4, 6, 8, 16 and ∞.
    pub values: Vec<f64>,
}

/// Accuracy-vs-ε sweep of a DP replacement for one function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub function: String,
    /// Columns of the function's relation fed to the model.
    pub inputs: Vec<String>,
    pub epsilons: Vec<f64>,
    pub test_fraction: f64,
    pub hidden: Vec<usize>,
    pub steps: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioFile {
    pub name: String,
    pub description: String,
    pub catalog: Catalog,
    pub tables: Vec<TableSource>,
    #[serde(default)]
    pub functions: Vec<FunctionImpl>,
    #[serde(default)]
    pub users: Vec<UserSpec>,
    #[serde(default)]
    pub datasets: Vec<DatasetBudget>,
    #[serde(default)]
    pub queries: Vec<ScenarioQuery>,
    #[serde(default)]
    pub constraints: Constraints,
    #[serde(default)]
    pub encoders: Vec<EncoderSpec>,
    #[serde(default)]
    pub pretrained: Vec<PretrainSpec>,
    #[serde(default)]
    pub curves: Vec<CurveSpec>,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
    /// Remaining-budget values the scenario is meant to be replayed at.
    #[serde(default)]
    pub budgets: Vec<f64>,
}


fn io_err(path: &Path, e: impl std::fmt::Display) -> ScenarioError {
    ScenarioError::Io { path: path.display().to_string(), message: e.to_string() }
}

pub fn read_bundle(dir: &Path) -> Result<(ScenarioFile, TableSet), ScenarioError> {
    let path = dir.join("scenario.json");
    let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    let s: ScenarioFile = serde_json::from_str(&text).map_err(|e| ScenarioError::Format(e.to_string()))?;
    s.catalog.validate().map_err(|e| ScenarioError::Format(e.to_string()))?;
    let mut tables = TableSet::new();
    for t in &s.tables {
        let rel = s.catalog.relation(&t.relation).ok_or_else(|| ScenarioError::Format(format!("no relation '{}'", t.relation)))?;
        let p = dir.join(&t.file);
        let f = std::fs::File::open(&p).map_err(|e| io_err(&p, e))?;
        tables.insert(&t.relation, Table::read_csv(f, &rel.columns())?);
    }
    Ok((s, tables))
}

pub fn write_bundle(dir: &Path, s: &ScenarioFile, tables: &[(String, Table)]) -> Result<(), ScenarioError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for src in &s.tables {
        let (_, t) = tables.iter().find(|(n, _)| *n == src.relation).ok_or_else(|| ScenarioError::Format(format!("no data for '{}'", src.relation)))?;
        let p = dir.join(&src.file);
        crate::persist::write_atomic(&p, &t.csv_bytes()).map_err(|e| io_err(&p, e))?;
    }
    let p = dir.join("scenario.json");
    let json = serde_json::to_string_pretty(s).map_err(|e| ScenarioError::Format(e.to_string()))?;
    crate::persist::write_atomic(&p, json.as_bytes()).map_err(|e| io_err(&p, e))
}

/// Loads a bundle from `dir`, or generates the bundled fixture of that
/// name when the directory does not exist.
pub fn load(dir_or_name: &str, fixtures_root: Option<&Path>) -> Result<(ScenarioFile, Environment), ScenarioError> {
    let p = Path::new(dir_or_name);
    let dir = if p.join("scenario.json").exists() { Some(p.to_path_buf()) } else { fixtures_root.map(|r| r.join(dir_or_name)).filter(|d| d.join("scenario.json").exists()) };
    let (s, tables) = match dir {
        Some(d) => read_bundle(&d)?,
        None => {
            let (s, t) = generate(dir_or_name).ok_or_else(|| ScenarioError::Unknown(dir_or_name.to_string()))?;
            let mut ts = TableSet::new();
            for (n, tab) in t {
                ts.insert(&n, tab);
            }
            (s, ts)
        }
    };
    let env = instantiate(&s, tables)?;
    Ok((s, env))
}

/// Builds functions, budgets, encoders, pretrained models and pinned cost
/// curves. Data reads made while pretraining are not counted.
pub fn instantiate(s: &ScenarioFile, tables: TableSet) -> Result<Environment, ScenarioError> {
    let mut catalog = s.catalog.clone();
    for d in &s.datasets {
        catalog.ledger.set_dataset_budget(&d.relation, d.epsilon, DEFAULT_DELTA).map_err(|e| ScenarioError::Format(e.to_string()))?;
    }
    for u in &s.users {
        catalog.ledger.set_user_budget(&u.name, u.epsilon, DEFAULT_DELTA).map_err(|e| ScenarioError::Format(e.to_string()))?;
        catalog.add_role(&u.role);
    }
    let mut functions = FunctionModels::new();
    for f in &s.functions {
        functions.insert(f.name.clone(), Arc::new(f.builtin.clone()));
    }
    let mut registry = ModelRegistry::default();
    for e in &s.encoders {
        let enc = FeatureEncoder::public(&[e.input_type]);
        let a = ModelArtifact::random_projection(e.id.clone(), enc, e.input_type, e.dim, e.seed);
        registry.register(a).map_err(|err| ScenarioError::Pretrain { id: e.id.clone(), message: err.to_string() })?;
    }
    for p in &s.pretrained {
        let fail = |m: String| ScenarioError::Pretrain { id: p.id.clone(), message: m };
        let signature = signature_for(&catalog, &p.function).ok_or_else(|| fail(format!("unknown function '{}'", p.function)))?;
        let dpsgd = dpsgd_at(p.epsilon, 100, p.seed).ok_or_else(|| fail(format!("cannot reach ε={}", p.epsilon)))?;
        let req = TrainingRequest {
            artifact_id: p.id.clone(),
            function: p.function.clone(),
            signature,
            source: TrainingSource::Labelled { relation: p.relation.clone(), inputs: p.inputs.clone(), label: p.label.clone() },
            method: TrainingMethod::Fixed { hidden: p.hidden.clone() },
            dpsgd,
            target_epsilon: p.epsilon,
        };
        materialize(&req, &tables, &functions, &mut registry).map_err(|e| fail(e.to_string()))?;
    }
    tables.reset_access_count();
    let mut cost_model = CostModel::default();
    for c in &s.curves {
        if c.values.len() != crate::optimizer::CURVE_POINTS {
            return Err(ScenarioError::Format(format!("curve {} needs {} values", c.scheme, crate::optimizer::CURVE_POINTS)));
        }
        let mut curve = AccuracyCurve::from_fn(|_| 0.0);
        curve.values = crate::optimizer::isotonic(&c.values, &[1.0; crate::optimizer::CURVE_POINTS]);
        cost_model.set_curve(&c.scheme, &c.task_key, curve);
    }
    Ok(Environment { catalog, tables, functions, registry, cost_model })
}

/// DP-SGD defaults (full batch, C = 1) with σ calibrated to `epsilon`.
pub fn dpsgd_at(epsilon: f64, steps: u64, seed: u64) -> Option<DpSgdConfig> {
    let sigma = calibrate_noise_multiplier(epsilon, steps, DEFAULT_DELTA)?;
    Some(DpSgdConfig { noise_multiplier: sigma, steps, seed, ..DpSgdConfig::default() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub epsilon: f64,
    pub noise_multiplier: f64,
    pub receipt_epsilon: f64,
    pub test_accuracy: f64,
}

/// Deterministic train/test split of a labelled relation: every row whose
/// position hash falls under `test_fraction` is held out.
pub fn split_rows(t: &Table, test_fraction: f64, seed: u64) -> (Table, Table) {
    let mut train = Table::new(t.columns.clone());
    let mut test = Table::new(t.columns.clone());
    for (i, r) in t.rows.iter().enumerate() {
        let h = fingerprint(&[seed.to_le_bytes(), (i as u64).to_le_bytes()].concat());
        let u = (h >> 11) as f64 / (1u64 << 53) as f64;
        if u < test_fraction { test.rows.push(r.clone()) } else { train.rows.push(r.clone()) }
    }
    (train, test)
}

/// Trains one DP replacement per ε and reports held-out accuracy.
pub fn sweep(catalog: &Catalog, tables: &TableSet, spec: &SweepSpec) -> Result<Vec<SweepRow>, ScenarioError> {
    let fail = |m: String| ScenarioError::Pretrain { id: format!("sweep:{}", spec.function), message: m };
    let f = catalog.function(&spec.function).ok_or_else(|| fail("unknown function".into()))?;
    let (Some(rel), Some(label)) = (f.relation.clone(), f.label_attribute.clone()) else {
        return Err(fail("function has no labelled relation".into()));
    };
    let table = tables.peek(&rel).ok_or_else(|| fail(format!("no data for {rel}")))?;
    let inputs = spec.inputs.clone();
    let (train, test) = split_rows(table, spec.test_fraction, spec.seed);
    let mut ts = TableSet::new();
    ts.insert(&rel, train);
    let signature = signature_for(catalog, &spec.function).ok_or_else(|| fail("no signature".into()))?;
    let idx = inputs.iter().map(|a| test.column_index(a).ok_or_else(|| fail(format!("no column {a}")))).collect::<Result<Vec<_>, _>>()?;
    let li = test.column_index(&label).ok_or_else(|| fail("label missing".into()))?;
    let cases: Vec<(Vec<Value>, Vec<Value>)> =
        test.rows.iter().map(|r| (idx.iter().map(|&i| r[i].clone()).collect(), vec![r[li].clone()])).collect();
    let mut out = Vec::new();
    for &eps in &spec.epsilons {
        let cfg = dpsgd_at(eps, spec.steps, spec.seed).ok_or_else(|| fail(format!("cannot reach ε={eps}")))?;
        let req = TrainingRequest {
            artifact_id: format!("sweep-{eps}"),
            function: spec.function.clone(),
            signature: signature.clone(),
            source: TrainingSource::Labelled { relation: rel.clone(), inputs: inputs.clone(), label: label.clone() },
            method: TrainingMethod::Fixed { hidden: spec.hidden.clone() },
            dpsgd: cfg.clone(),
            target_epsilon: eps,
        };
        let mut reg = ModelRegistry::default();
        let o = materialize(&req, &ts, &FunctionModels::new(), &mut reg).map_err(|e| fail(e.to_string()))?;
        let a = reg.get(&o.artifact_id).expect("registered");
        let acc = a.accuracy(cases.iter().map(|(x, y)| (x.as_slice(), y.as_slice()))).map_err(|e| fail(e.to_string()))?;
        out.push(SweepRow {
            epsilon: eps,
            noise_multiplier: cfg.noise_multiplier,
            receipt_epsilon: o.report.map_or(f64::NAN, |r| r.epsilon),
            test_accuracy: acc,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Fixture generators

pub const POSITIVE_WORDS: [&str; 8] = ["brilliant", "moving", "delightful", "masterful", "gripping", "wonderful", "witty", "radiant"];
pub const NEGATIVE_WORDS: [&str; 8] = ["dull", "tedious", "clumsy", "boring", "lifeless", "shallow", "dreadful", "bland"];
const FILLER: [&str; 16] = [
    "the", "film", "plot", "actors", "scene", "story", "director", "camera", "music", "ending", "script", "cast", "pacing", "dialogue",
    "screen", "hour",
];

/// The IMDB count query over a five-day window.
pub const IMDB_QUERY: &str = "SELECT count(*) FROM IMDB_MOVIE_REVIEW R WHERE R.date > '06/01/2015' AND R.date < '06/05/2015' AND sentiment_classifier(R.Review) = Positive";

pub fn generate(name: &str) -> Option<(ScenarioFile, Vec<(String, Table)>)> {
    match name {
        "imdb_sentiment" => Some(imdb_sentiment(2000, 7)),
        "imdb_sweep" => Some(imdb_sweep()),
        "alzheimers_care" => Some(alzheimers_care(11)),
        "crossover" => Some(crossover()),
        _ => None,
    }
}

fn lexicon() -> BuiltinFunction {
    BuiltinFunction::Lexicon {
        positive: POSITIVE_WORDS.iter().map(|s| s.to_string()).collect(),
        negative: NEGATIVE_WORDS.iter().map(|s| s.to_string()).collect(),
        positive_label: "Positive".into(),
        negative_label: "Negative".into(),
    }
}

/// Reviews with three words of their class, at most one of the other and
/// five filler words, shuffled; labels agree with the lexicon classifier.
pub fn synthetic_reviews(n: usize, seed: u64, first_id: i64) -> Table {
    let mut rng = NoiseRng::new(seed);
    let mut t = Table::new(imdb_columns());
    for i in 0..n {
        let positive = rng.uniform() < 0.5;
        let (own, other) = if positive { (&POSITIVE_WORDS, &NEGATIVE_WORDS) } else { (&NEGATIVE_WORDS, &POSITIVE_WORDS) };
        let mut words: Vec<&str> = (0..3).map(|_| own[rng.below(own.len())]).collect();
        if rng.uniform() < 0.5 {
            words.push(other[rng.below(other.len())]);
        }
        words.extend((0..5).map(|_| FILLER[rng.below(FILLER.len())]));
        for k in (1..words.len()).rev() {
            words.swap(k, rng.below(k + 1));
        }
        let day = 1 + rng.below(7);
        let row = vec![
            Value::Int(first_id + i as i64),
            Value::text(format!("06/{day:02}/2015")),
            Value::text(words.join(" ")),
            Value::text(if positive { "Positive" } else { "Negative" }),
        ];
        t.push(row).expect("schema");
    }
    t
}

fn imdb_columns() -> Vec<Column> {
    vec![
        Column::new("review_id", DataType::Int64),
        Column::new("date", DataType::Text),
        Column::new("Review", DataType::Text),
        Column::new("sentiment", DataType::Text),
    ]
}

fn imdb_relation(name: &str, rows: u64) -> RelationDescriptor {
    RelationDescriptor::new(
        name,
        vec![
            AttributeDescriptor::new("review_id", DataType::Int64),
            AttributeDescriptor::new("date", DataType::Text),
            AttributeDescriptor::new("Review", DataType::Text),
            AttributeDescriptor::new("sentiment", DataType::Text),
        ],
        rows,
    )
}

fn sentiment_function(relation: &str) -> FunctionSignature {
    FunctionSignature {
        name: "sentiment_classifier".into(),
        input_types: vec![DataType::Text],
        output_type: DataType::Text,
        task: Task::Classification,
        label_attribute: Some("sentiment".into()),
        relation: Some(relation.into()),
        output_labels: vec!["Negative".into(), "Positive".into()],
    }
}

fn imdb_catalog(rows: u64, role_eps: f64) -> Catalog {
    let mut c = Catalog::new();
    c.add_relation(imdb_relation("IMDB_MOVIE_REVIEW", rows)).expect("fresh");
    c.add_function(sentiment_function("IMDB_MOVIE_REVIEW"));
    for r in ["data_scientist", "admin"] {
        c.add_role(r);
    }
    let params = BTreeMap::from([("data_scientist".to_string(), role_eps)]);
    c.annotate_taint("IMDB_MOVIE_REVIEW", &["Review".into(), "sentiment".into()], None, &params).expect("known attributes");
    c
}

fn base_scenario(name: &str, description: &str, catalog: Catalog, tables: Vec<TableSource>) -> ScenarioFile {
    ScenarioFile {
        name: name.into(),
        description: description.into(),
        catalog,
        tables,
        functions: vec![],
        users: vec![],
        datasets: vec![],
        queries: vec![],
        constraints: Constraints::default(),
        encoders: vec![],
        pretrained: vec![],
        curves: vec![],
        sweep: None,
        budgets: vec![],
    }
}

pub fn imdb_sentiment(n: usize, seed: u64) -> (ScenarioFile, Vec<(String, Table)>) {
    let table = synthetic_reviews(n, seed, 1);
    let mut s = base_scenario(
        "imdb_sentiment",
        "Synthetic movie reviews with planted sentiment; count positive reviews in a date window.",
        imdb_catalog(n as u64, 8.0),
        vec![TableSource { relation: "IMDB_MOVIE_REVIEW".into(), file: "IMDB_MOVIE_REVIEW.csv".into() }],
    );
    s.functions = vec![FunctionImpl { name: "sentiment_classifier".into(), builtin: lexicon() }];
    s.users = vec![
        UserSpec { name: "alice".into(), role: "data_scientist".into(), epsilon: 50.0 },
        UserSpec { name: "root".into(), role: "admin".into(), epsilon: 100.0 },
    ];
    s.datasets = vec![DatasetBudget { relation: "IMDB_MOVIE_REVIEW".into(), epsilon: 100.0 }];
    s.queries = vec![
        ScenarioQuery { name: "positive_count".into(), sql: IMDB_QUERY.into(), user: "alice".into() },
        ScenarioQuery {
            name: "public_dates".into(),
            sql: "SELECT R.review_id, R.date FROM IMDB_MOVIE_REVIEW R WHERE R.date > '06/05/2015'".into(),
            user: "alice".into(),
        },
    ];
    s.encoders = vec![EncoderSpec { id: "text-encoder-v1".into(), input_type: DataType::Text, dim: 32, seed: 3 }];
    (s, vec![("IMDB_MOVIE_REVIEW".into(), table)])
}

pub fn imdb_sweep() -> (ScenarioFile, Vec<(String, Table)>) {
    let (mut s, t) = imdb_sentiment(2000, 7);
    s.name = "imdb_sweep".into();
    s.description = "Held-out accuracy of DP replacements for the sentiment classifier across the ε grid.".into();
    s.sweep = Some(SweepSpec {
        function: "sentiment_classifier".into(),
        inputs: vec!["Review".into()],
        epsilons: crate::rewrite::EPSILON_GRID.to_vec(),
        test_fraction: 0.3,
        hidden: vec![16],
        steps: 100,
        seed: 5,
    });
    (s, t)
}

const FIRST_NAMES: [&str; 10] = ["John", "Mary", "Ahmed", "Li", "Sofia", "Kwame", "Elena", "Raj", "Hannah", "Tomas"];
const LAST_NAMES: [&str; 4] = ["Okafor", "Schmidt", "Tanaka", "Alvarez"];
pub const ALZHEIMERS_QUERY: &str = "SELECT MRI_Images FROM Central_Hospital_Organization WHERE Nurse_Location = 'Elderly Care-1' AND Alzheimer_Patient_Name = 'John Okafor' AND Alzheimer_Patient_Age = 67";

pub fn alzheimers_care(seed: u64) -> (ScenarioFile, Vec<(String, Table)>) {
    let mut rng = NoiseRng::new(seed);
    let hosp_cols = vec![
        Column::new("visit_id", DataType::Int64),
        Column::new("Nurse_Location", DataType::Text),
        Column::new("Alzheimer_Patient_Name", DataType::Text),
        Column::new("Alzheimer_Patient_Age", DataType::Int64),
        Column::new("Blood_Pressure", DataType::Text),
        Column::new("MRI_Images", DataType::Blob),
    ];
    let vit_cols = vec![
        Column::new("patient_id", DataType::Int64),
        Column::new("Age", DataType::Int64),
        Column::new("Systolic", DataType::Int64),
        Column::new("Diastolic", DataType::Int64),
        Column::new("risk", DataType::Text),
    ];
    let mut hosp = Table::new(hosp_cols.clone());
    let mut vitals = Table::new(vit_cols.clone());
    let mut visit = 1;
    for (p, name) in FIRST_NAMES.iter().flat_map(|f| LAST_NAMES.iter().map(move |l| format!("{f} {l}"))).enumerate() {
        let age = if p == 0 { 67 } else { 60 + rng.below(31) as i64 };
        let loc = format!("Elderly Care-{}", 1 + p % 3);
        let scan: Vec<u8> = (0..16u64).flat_map(|k| fingerprint(&[name.as_bytes(), &k.to_le_bytes()].concat()).to_le_bytes()).take(32).collect();
        for _ in 0..(2 + rng.below(3)) {
            let sys = 105 + rng.below(60) as i64;
            let dia = 65 + rng.below(35) as i64;
            hosp.push(vec![
                Value::Int(visit),
                Value::text(loc.clone()),
                Value::text(name.clone()),
                Value::Int(age),
                Value::text(format!("{sys}/{dia}")),
                Value::Blob(scan.clone()),
            ])
            .expect("schema");
            let risk = if sys >= 140 || dia >= 90 { "High" } else { "Low" };
            vitals.push(vec![Value::Int(p as i64 + 1), Value::Int(age), Value::Int(sys), Value::Int(dia), Value::text(risk)]).expect("schema");
            visit += 1;
        }
    }
    let mut c = Catalog::new();
    let mut h = RelationDescriptor::new(
        "Central_Hospital_Organization",
        hosp_cols.iter().map(|c| AttributeDescriptor::new(&c.name, c.data_type)).collect(),
        hosp.len() as u64,
    );
    h.attributes.iter_mut().for_each(|a| a.per_role_epsilon.insert("nurse".into(), 8.0).map_or((), |_| ()));
    c.add_relation(h).expect("fresh");
    let mut v = RelationDescriptor::new("Patient_Vitals", vit_cols.iter().map(|c| AttributeDescriptor::new(&c.name, c.data_type)).collect(), vitals.len() as u64);
    for a in v.attributes.iter_mut() {
        a.sum_bound = match a.name.as_str() {
            "Systolic" => Some(250.0),
            "Diastolic" => Some(150.0),
            "Age" => Some(120.0),
            _ => None,
        };
    }
    c.add_relation(v).expect("fresh");
    c.add_function(FunctionSignature {
        name: "risk_classifier".into(),
        input_types: vec![DataType::Int64, DataType::Int64],
        output_type: DataType::Text,
        task: Task::Classification,
        label_attribute: Some("risk".into()),
        relation: Some("Patient_Vitals".into()),
        output_labels: vec!["High".into(), "Low".into()],
    });
    for r in ["nurse", "admin"] {
        c.add_role(r);
    }
    let nurse = BTreeMap::from([("nurse".to_string(), 8.0)]);
    c.annotate_taint(
        "Central_Hospital_Organization",
        &["Alzheimer_Patient_Name".into(), "Alzheimer_Patient_Age".into(), "Blood_Pressure".into(), "MRI_Images".into()],
        None,
        &nurse,
    )
    .expect("known attributes");
    c.annotate_taint("Patient_Vitals", &["Age".into(), "Systolic".into(), "Diastolic".into(), "risk".into()], None, &nurse)
        .expect("known attributes");
    let mut s = base_scenario(
        "alzheimers_care",
        "Synthetic elderly-care records: MRI retrieval by patient, and vital-sign risk counts.",
        c,
        vec![
            TableSource { relation: "Central_Hospital_Organization".into(), file: "Central_Hospital_Organization.csv".into() },
            TableSource { relation: "Patient_Vitals".into(), file: "Patient_Vitals.csv".into() },
        ],
    );
    s.functions = vec![FunctionImpl {
        name: "risk_classifier".into(),
        builtin: BuiltinFunction::Threshold { thresholds: vec![140.0, 90.0], above_label: "High".into(), below_label: "Low".into() },
    }];
    s.users = vec![
        UserSpec { name: "nurse_kim".into(), role: "nurse".into(), epsilon: 40.0 },
        UserSpec { name: "root".into(), role: "admin".into(), epsilon: 100.0 },
    ];
    s.datasets = vec![
        DatasetBudget { relation: "Central_Hospital_Organization".into(), epsilon: 100.0 },
        DatasetBudget { relation: "Patient_Vitals".into(), epsilon: 100.0 },
    ];
    s.queries = vec![
        ScenarioQuery { name: "mri_lookup".into(), sql: ALZHEIMERS_QUERY.into(), user: "nurse_kim".into() },
        ScenarioQuery {
            name: "high_risk_count".into(),
            sql: "SELECT count(*) FROM Patient_Vitals V WHERE risk_classifier(V.Systolic, V.Diastolic) = High".into(),
            user: "nurse_kim".into(),
        },
        ScenarioQuery { name: "avg_systolic".into(), sql: "SELECT avg(V.Systolic) FROM Patient_Vitals V WHERE V.Age > 75".into(), user: "nurse_kim".into() },
    ];
    s.pretrained = vec![PretrainSpec {
        id: "risk-dp-v1".into(),
        function: "risk_classifier".into(),
        relation: "Patient_Vitals".into(),
        inputs: vec!["Systolic".into(), "Diastolic".into()],
        label: "risk".into(),
        epsilon: 2.0,
        hidden: vec![8],
        seed: 17,
    }];
    (s, vec![("Central_Hospital_Organization".into(), hosp), ("Patient_Vitals".into(), vitals)])
}

/// Scheme A (transfer from an archive model) is more accurate below ε = 6,
/// scheme B (from scratch) above it.
pub fn crossover() -> (ScenarioFile, Vec<(String, Table)>) {
    let current = synthetic_reviews(400, 21, 1);
    let archive = synthetic_reviews(400, 22, 10_001);
    let mut c = imdb_catalog(400, 16.0);
    c.add_relation(imdb_relation("IMDB_ARCHIVE", 400)).expect("fresh");
    let mut s = base_scenario(
        "crossover",
        "Transfer from an archive model versus training from scratch; the better scheme depends on the budget.",
        c,
        vec![
            TableSource { relation: "IMDB_MOVIE_REVIEW".into(), file: "IMDB_MOVIE_REVIEW.csv".into() },
            TableSource { relation: "IMDB_ARCHIVE".into(), file: "IMDB_ARCHIVE.csv".into() },
        ],
    );
    s.functions = vec![FunctionImpl { name: "sentiment_classifier".into(), builtin: lexicon() }];
    s.users = vec![UserSpec { name: "alice".into(), role: "data_scientist".into(), epsilon: 100.0 }];
    s.datasets = vec![DatasetBudget { relation: "IMDB_MOVIE_REVIEW".into(), epsilon: 100.0 }];
    s.queries = vec![ScenarioQuery { name: "positive_count".into(), sql: IMDB_QUERY.into(), user: "alice".into() }];
    s.pretrained = vec![PretrainSpec {
        id: "sentiment-archive-v1".into(),
        function: "sentiment_classifier".into(),
        relation: "IMDB_ARCHIVE".into(),
        inputs: vec!["Review".into()],
        label: "sentiment".into(),
        epsilon: 4.0,
        hidden: vec![16],
        seed: 9,
    }];
    s.curves = vec![
        CurveSpec { scheme: "S1:transfer".into(), task_key: "sentiment_classifier".into(), values: vec![0.70, 0.78, 0.82, 0.84, 0.85, 0.85, 0.855, 0.86] },
        CurveSpec { scheme: "S1:scratch".into(), task_key: "sentiment_classifier".into(), values: vec![0.50, 0.60, 0.70, 0.80, 0.85, 0.90, 0.93, 0.95] },
    ];
    s.constraints = Constraints {
        weights: Weights { epsilon: 0.0, accuracy: 10.0, latency: 0.0 },
        schemes: vec!["S1:transfer".into(), "S1:scratch".into()],
        ..Constraints::default()
    };
    s.budgets = vec![3.0, 10.0];
    (s, vec![("IMDB_MOVIE_REVIEW".into(), current), ("IMDB_ARCHIVE".into(), archive)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planted_labels_match_lexicon() {
        let t = synthetic_reviews(300, 1, 1);
        let f = lexicon();
        for r in &t.rows {
            assert_eq!(f.predict(&r[2..3]).unwrap()[0][0], r[3]);
        }
    }

    #[test]
    fn bundles_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (s, t) = alzheimers_care(11);
        write_bundle(dir.path(), &s, &t).unwrap();
        let (s2, ts) = read_bundle(dir.path()).unwrap();
        assert_eq!(s, s2);
        for (n, tab) in &t {
            assert_eq!(ts.peek(n).unwrap(), tab);
        }
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let t = synthetic_reviews(200, 3, 1);
        let (a, b) = split_rows(&t, 0.3, 9);
        assert_eq!(a.len() + b.len(), 200);
        assert_eq!(split_rows(&t, 0.3, 9).1, b);
        assert!(b.len() > 30 && b.len() < 90);
    }
}
