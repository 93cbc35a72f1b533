//! Relation schemas, sensitivity annotations, view-based access policies,
//! model-call function signatures and the privacy budget ledger.

pub mod ledger;
pub mod predicate;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use ledger::{BudgetAccount, BudgetLedger, DebitEntry, DEFAULT_DELTA};
pub use predicate::RowPredicate;

use crate::exec::table::{cell_text, TableSet};
use crate::types::{DataType, Task};

/// Max ε for a role when no attribute declares one.
pub const DEFAULT_ROLE_EPSILON: f64 = 1.0;
pub const REDACTED: &str = "REDACTED";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CatalogError {
    #[error("unknown relation '{0}'")]
    UnknownRelation(String),
    #[error("unknown attribute '{attribute}' in relation '{relation}'")]
    UnknownAttribute { relation: String, attribute: String },
    #[error("unknown role '{0}'")]
    UnknownRole(String),
    #[error("unknown user '{0}'")]
    UnknownUser(String),
    #[error("unknown dataset '{0}'")]
    UnknownDataset(String),
    #[error("unknown function '{0}'")]
    UnknownFunction(String),
    #[error("insufficient privacy budget for {holder}: requested {requested}, remaining {remaining}")]
    InsufficientBudget { holder: String, requested: f64, remaining: f64 },
    #[error("invalid epsilon {0}")]
    InvalidEpsilon(f64),
    #[error("invalid delta {0}")]
    InvalidDelta(f64),
    #[error("catalog version conflict: expected {expected}, current {current}")]
    VersionConflict { expected: u64, current: u64 },
    #[error("invalid catalog: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeDescriptor {
    pub name: String,
    pub data_type: DataType,
    #[serde(default)]
    pub tainted: bool,
    #[serde(default)]
    pub per_role_epsilon: BTreeMap<String, f64>,
    /// Clamp bound |x| ≤ B used as the sensitivity of private SUM/AVG.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sum_bound: Option<f64>,
}

impl AttributeDescriptor {
    pub fn new(name: &str, data_type: DataType) -> Self {
        AttributeDescriptor {
            name: name.to_string(),
            data_type,
            tainted: false,
            per_role_epsilon: BTreeMap::new(),
            sum_bound: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationDescriptor {
    pub name: String,
    pub attributes: Vec<AttributeDescriptor>,
    #[serde(default)]
    pub tuple_taint_predicate: Option<RowPredicate>,
    #[serde(default)]
    pub row_count_estimate: u64,
}

impl RelationDescriptor {
    pub fn new(name: &str, attributes: Vec<AttributeDescriptor>, row_count_estimate: u64) -> Self {
        RelationDescriptor { name: name.to_string(), attributes, tuple_taint_predicate: None, row_count_estimate }
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeDescriptor> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn columns(&self) -> Vec<crate::types::Column> {
        self.attributes.iter().map(|a| crate::types::Column::new(a.name.clone(), a.data_type)).collect()
    }

    fn validate(&self) -> Result<(), CatalogError> {
        if self.attributes.is_empty() {
            return Err(CatalogError::Invalid(format!("relation '{}' has no attributes", self.name)));
        }
        let mut seen = BTreeSet::new();
        for a in &self.attributes {
            if !seen.insert(a.name.as_str()) {
                return Err(CatalogError::Invalid(format!("duplicate attribute '{}' in '{}'", a.name, self.name)));
            }
            if a.per_role_epsilon.values().any(|e| !(*e > 0.0)) {
                return Err(CatalogError::Invalid(format!("per-role epsilon of '{}' must be positive", a.name)));
            }
        }
        if let Some(p) = &self.tuple_taint_predicate {
            self.check_predicate(p)?;
        }
        Ok(())
    }

    fn check_predicate(&self, p: &RowPredicate) -> Result<(), CatalogError> {
        for a in p.attributes() {
            if self.attribute(&a).is_none() {
                return Err(CatalogError::UnknownAttribute { relation: self.name.clone(), attribute: a });
            }
        }
        Ok(())
    }
}

/// One view `π_attributes(σ_filter(relation))` granted to a role.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyView {
    pub relation: String,
    pub attributes: Vec<String>,
    #[serde(default)]
    pub filter: Option<RowPredicate>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccessPolicy {
    pub role: String,
    pub views: Vec<PolicyView>,
}

/// Signature of a model-call function usable in queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionSignature {
    pub name: String,
    pub input_types: Vec<DataType>,
    pub output_type: DataType,
    pub task: Task,
    /// Column holding ground-truth outputs of the function for each row of
    /// `relation`; supplies training labels for replacement models.
    #[serde(default)]
    pub label_attribute: Option<String>,
    #[serde(default)]
    pub relation: Option<String>,
    /// Class labels, for classification functions.
    #[serde(default)]
    pub output_labels: Vec<String>,
}

/// Taint of one relation as seen by one role.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationTaint {
    pub attributes: BTreeSet<String>,
    pub tuple_predicate: Option<RowPredicate>,
}

impl RelationTaint {
    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty() && self.tuple_predicate.is_none()
    }

    fn merge(&mut self, other: RelationTaint) {
        self.attributes.extend(other.attributes);
        self.tuple_predicate = match (self.tuple_predicate.take(), other.tuple_predicate) {
            (None, p) | (p, None) => p,
            (Some(a), Some(b)) => RowPredicate::any(vec![a, b]),
        };
    }
}

pub type TaintSet = BTreeMap<String, RelationTaint>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeListing {
    pub name: String,
    pub data_type: DataType,
    pub redacted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationListing {
    pub name: String,
    pub attributes: Vec<AttributeListing>,
    pub row_count_estimate: u64,
    /// Rows touched by a tuple-level taint are withheld from the sample.
    pub tuple_filter: Option<String>,
    pub sample_rows: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaListing {
    pub role: String,
    pub relations: Vec<RelationListing>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    #[serde(default)]
    pub version: u64,
    pub relations: Vec<RelationDescriptor>,
    #[serde(default)]
    pub policies: Vec<AccessPolicy>,
    #[serde(default)]
    pub ledger: BudgetLedger,
    #[serde(default)]
    pub roles: BTreeSet<String>,
    #[serde(default)]
    pub functions: Vec<FunctionSignature>,
}

impl Catalog {
    pub fn new() -> Self {
        Catalog::default()
    }

    pub fn from_json(text: &str) -> Result<Catalog, CatalogError> {
        let c: Catalog = serde_json::from_str(text).map_err(|e| CatalogError::Invalid(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes")
    }

    pub fn validate(&self) -> Result<(), CatalogError> {
        let mut names = BTreeSet::new();
        for r in &self.relations {
            if !names.insert(r.name.as_str()) {
                return Err(CatalogError::Invalid(format!("duplicate relation '{}'", r.name)));
            }
            r.validate()?;
        }
        for p in &self.policies {
            self.check_policy(p)?;
        }
        Ok(())
    }

    pub fn add_relation(&mut self, relation: RelationDescriptor) -> Result<(), CatalogError> {
        relation.validate()?;
        if self.relation(&relation.name).is_some() {
            return Err(CatalogError::Invalid(format!("relation '{}' already exists", relation.name)));
        }
        self.relations.push(relation);
        self.version += 1;
        Ok(())
    }

    pub fn add_function(&mut self, f: FunctionSignature) {
        self.functions.retain(|g| g.name != f.name);
        self.functions.push(f);
        self.version += 1;
    }

    pub fn add_role(&mut self, role: &str) {
        if self.roles.insert(role.to_string()) {
            self.version += 1;
        }
    }

    pub fn relation(&self, name: &str) -> Option<&RelationDescriptor> {
        self.relations.iter().find(|r| r.name == name)
    }

    pub fn relation_mut(&mut self, name: &str) -> Option<&mut RelationDescriptor> {
        self.relations.iter_mut().find(|r| r.name == name)
    }

    pub fn function(&self, name: &str) -> Option<&FunctionSignature> {
        self.functions.iter().find(|f| f.name == name)
    }

    pub fn known_roles(&self) -> BTreeSet<String> {
        let mut roles = self.roles.clone();
        roles.extend(self.policies.iter().map(|p| p.role.clone()));
        for r in &self.relations {
            for a in &r.attributes {
                roles.extend(a.per_role_epsilon.keys().cloned());
            }
        }
        roles
    }

    /// Marks attributes tainted, stores the tuple predicate and per-role ε.
    /// Returns whether anything changed; repeating a call is a no-op.
    pub fn annotate_taint(
        &mut self,
        relation: &str,
        attributes: &[String],
        tuple_predicate: Option<RowPredicate>,
        params: &BTreeMap<String, f64>,
    ) -> Result<bool, CatalogError> {
        let before = self.clone();
        self.apply_annotation(relation, attributes, tuple_predicate, params)?;
        let changed = self.relations != before.relations;
        if changed {
            self.version = before.version + 1;
        }
        Ok(changed)
    }

    /// Like [`Catalog::annotate_taint`] but refuses to change a catalog
    /// whose version moved past `expected_version`.
    pub fn annotate_taint_checked(
        &mut self,
        expected_version: Option<u64>,
        relation: &str,
        attributes: &[String],
        tuple_predicate: Option<RowPredicate>,
        params: &BTreeMap<String, f64>,
    ) -> Result<bool, CatalogError> {
        let mut trial = self.clone();
        let changed = trial.annotate_taint(relation, attributes, tuple_predicate, params)?;
        if let Some(expected) = expected_version {
            if changed && expected != self.version {
                return Err(CatalogError::VersionConflict { expected, current: self.version });
            }
        }
        *self = trial;
        Ok(changed)
    }

    fn apply_annotation(
        &mut self,
        relation: &str,
        attributes: &[String],
        tuple_predicate: Option<RowPredicate>,
        params: &BTreeMap<String, f64>,
    ) -> Result<(), CatalogError> {
        if let Some((role, e)) = params.iter().find(|(_, e)| !(**e > 0.0) || !e.is_finite()) {
            return Err(CatalogError::Invalid(format!("epsilon for role '{role}' must be positive, got {e}")));
        }
        let rel = self.relation_mut(relation).ok_or_else(|| CatalogError::UnknownRelation(relation.to_string()))?;
        for a in attributes {
            if rel.attribute(a).is_none() {
                return Err(CatalogError::UnknownAttribute { relation: relation.to_string(), attribute: a.clone() });
            }
        }
        if let Some(p) = &tuple_predicate {
            rel.check_predicate(p)?;
        }
        for attr in rel.attributes.iter_mut().filter(|x| attributes.contains(&x.name)) {
            attr.tainted = true;
            for (role, e) in params {
                attr.per_role_epsilon.insert(role.clone(), *e);
            }
        }
        if tuple_predicate.is_some() {
            rel.tuple_taint_predicate = tuple_predicate;
        }
        Ok(())
    }

    fn check_policy(&self, policy: &AccessPolicy) -> Result<(), CatalogError> {
        for v in &policy.views {
            let rel = self.relation(&v.relation).ok_or_else(|| CatalogError::UnknownRelation(v.relation.clone()))?;
            for a in &v.attributes {
                if rel.attribute(a).is_none() {
                    return Err(CatalogError::UnknownAttribute { relation: v.relation.clone(), attribute: a.clone() });
                }
            }
            if let Some(f) = &v.filter {
                rel.check_predicate(f)?;
            }
        }
        Ok(())
    }

    /// Taints implied by a view-based policy: for every base relation the
    /// role can see, attributes absent from all of its views, and the rows
    /// excluded by every view filter.
    pub fn extract_taints_from_policy(&self, policy: &AccessPolicy) -> Result<TaintSet, CatalogError> {
        self.check_policy(policy)?;
        let mut by_rel: BTreeMap<&str, Vec<&PolicyView>> = BTreeMap::new();
        for v in &policy.views {
            by_rel.entry(v.relation.as_str()).or_default().push(v);
        }
        let mut out = TaintSet::new();
        for (rel_name, views) in by_rel {
            let rel = self.relation(rel_name).expect("checked");
            let visible: BTreeSet<&str> = views.iter().flat_map(|v| v.attributes.iter().map(String::as_str)).collect();
            let attributes: BTreeSet<String> =
                rel.attributes.iter().filter(|a| !visible.contains(a.name.as_str())).map(|a| a.name.clone()).collect();
            // A row is hidden when no view admits it; a view without a filter admits all rows.
            let tuple_predicate = if views.iter().any(|v| v.filter.is_none()) {
                None
            } else {
                RowPredicate::all(views.iter().map(|v| v.filter.clone().expect("filtered").negate()).collect())
            };
            let t = RelationTaint { attributes, tuple_predicate };
            if !t.is_empty() {
                out.insert(rel_name.to_string(), t);
            }
        }
        Ok(out)
    }

    /// Installs (or replaces) the policy of a role.
    pub fn set_policy(&mut self, policy: AccessPolicy) -> Result<bool, CatalogError> {
        self.check_policy(&policy)?;
        if self.policies.iter().any(|p| *p == policy) {
            return Ok(false);
        }
        self.policies.retain(|p| p.role != policy.role);
        self.policies.push(policy);
        self.version += 1;
        Ok(true)
    }

    /// Union of the global annotations and the taints derived from the
    /// role's stored policy.
    pub fn role_taints(&self, role: &str) -> TaintSet {
        let mut out = TaintSet::new();
        for r in &self.relations {
            let t = RelationTaint {
                attributes: r.attributes.iter().filter(|a| a.tainted).map(|a| a.name.clone()).collect(),
                tuple_predicate: r.tuple_taint_predicate.clone(),
            };
            if !t.is_empty() {
                out.insert(r.name.clone(), t);
            }
        }
        for p in self.policies.iter().filter(|p| p.role == role) {
            if let Ok(derived) = self.extract_taints_from_policy(p) {
                for (rel, t) in derived {
                    out.entry(rel).or_default().merge(t);
                }
            }
        }
        out
    }

    /// Default max ε of a role over the given relations: the smallest
    /// per-role ε declared on any of their attributes, else the global default.
    pub fn role_epsilon(&self, role: &str, relations: &[String]) -> f64 {
        self.relations
            .iter()
            .filter(|r| relations.contains(&r.name))
            .flat_map(|r| r.attributes.iter())
            .filter_map(|a| a.per_role_epsilon.get(role).copied())
            .fold(None, |m: Option<f64>, e| Some(m.map_or(e, |m| m.min(e))))
            .unwrap_or(DEFAULT_ROLE_EPSILON)
    }

    /// Schema listing for a role with tainted attribute values replaced by
    /// a redaction marker. When `tables` is given, up to `sample` rows per
    /// relation are included, skipping rows under a tuple-level taint.
    pub fn describe(&self, role: &str, tables: Option<&TableSet>, sample: usize) -> Result<SchemaListing, CatalogError> {
        if !self.known_roles().contains(role) {
            return Err(CatalogError::UnknownRole(role.to_string()));
        }
        let taints = self.role_taints(role);
        let mut relations = Vec::new();
        for r in &self.relations {
            let t = taints.get(&r.name).cloned().unwrap_or_default();
            let attributes: Vec<AttributeListing> = r
                .attributes
                .iter()
                .map(|a| AttributeListing {
                    name: a.name.clone(),
                    data_type: a.data_type,
                    redacted: t.attributes.contains(&a.name),
                })
                .collect();
            let mut sample_rows = Vec::new();
            if let Some(table) = tables.and_then(|ts| ts.peek(&r.name)) {
                for row in &table.rows {
                    if sample_rows.len() >= sample {
                        break;
                    }
                    if let Some(p) = &t.tuple_predicate {
                        let lookup = |name: &str| table.column_index(name).map(|i| &row[i]);
                        if p.eval(&lookup) {
                            continue;
                        }
                    }
                    let cells = attributes
                        .iter()
                        .map(|a| match table.column_index(&a.name) {
                            _ if a.redacted => REDACTED.to_string(),
                            Some(i) => cell_text(&row[i]),
                            None => String::new(),
                        })
                        .collect();
                    sample_rows.push(cells);
                }
            }
            relations.push(RelationListing {
                name: r.name.clone(),
                attributes,
                row_count_estimate: r.row_count_estimate,
                tuple_filter: t.tuple_predicate.as_ref().map(|p| p.to_string()),
                sample_rows,
            });
        }
        Ok(SchemaListing { role: role.to_string(), relations })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::CmpOp;

    fn imdb() -> Catalog {
        let mut c = Catalog::new();
        c.add_relation(RelationDescriptor::new(
            "IMDB_MOVIE_REVIEW",
            vec![
                AttributeDescriptor::new("review_id", DataType::Int64),
                AttributeDescriptor::new("date", DataType::Text),
                AttributeDescriptor::new("Review", DataType::Text),
            ],
            2000,
        ))
        .unwrap();
        c.add_role("data_scientist");
        c
    }

    #[test]
    fn annotate_unknowns() {
        let mut c = imdb();
        let none = BTreeMap::new();
        assert!(matches!(c.annotate_taint("Nope", &[], None, &none), Err(CatalogError::UnknownRelation(_))));
        assert!(matches!(
            c.annotate_taint("IMDB_MOVIE_REVIEW", &["zzz".into()], None, &none),
            Err(CatalogError::UnknownAttribute { .. })
        ));
    }

    #[test]
    fn empty_annotation_is_noop() {
        let mut c = imdb();
        let before = c.clone();
        assert!(!c.annotate_taint("IMDB_MOVIE_REVIEW", &[], None, &BTreeMap::new()).unwrap());
        assert_eq!(c, before);
    }

    #[test]
    fn policy_projection_taints_review() {
        let c = imdb();
        let p = AccessPolicy {
            role: "analyst".into(),
            views: vec![PolicyView {
                relation: "IMDB_MOVIE_REVIEW".into(),
                attributes: vec!["review_id".into(), "date".into()],
                filter: None,
            }],
        };
        let t = c.extract_taints_from_policy(&p).unwrap();
        assert_eq!(t["IMDB_MOVIE_REVIEW"].attributes, BTreeSet::from(["Review".to_string()]));
        assert_eq!(t["IMDB_MOVIE_REVIEW"].tuple_predicate, None);
    }

    #[test]
    fn policy_filter_complement() {
        let c = imdb();
        let filter = RowPredicate::compare("date", CmpOp::Gt, "2015-01-01");
        let p = AccessPolicy {
            role: "analyst".into(),
            views: vec![PolicyView {
                relation: "IMDB_MOVIE_REVIEW".into(),
                attributes: vec!["review_id".into(), "date".into(), "Review".into()],
                filter: Some(filter.clone()),
            }],
        };
        let t = c.extract_taints_from_policy(&p).unwrap();
        assert_eq!(t["IMDB_MOVIE_REVIEW"].tuple_predicate, Some(filter.negate()));
        assert!(t["IMDB_MOVIE_REVIEW"].attributes.is_empty());
    }

    #[test]
    fn unknown_role() {
        assert!(matches!(imdb().describe("ghost", None, 0), Err(CatalogError::UnknownRole(_))));
    }

    #[test]
    fn json_round_trip() {
        let mut c = imdb();
        c.ledger.set_user_budget("alice", 5.0, DEFAULT_DELTA).unwrap();
        let back = Catalog::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }
}
