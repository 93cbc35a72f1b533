//! Per-dataset and per-user privacy budget ledger.
//!
//! Amounts are kept on an integer grid of 1e-9 ε so that conservation
//! (`initial − Σ debits = remaining`) holds exactly; debits round up.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::CatalogError;

const NANO: f64 = 1e9;

pub fn to_nano(epsilon: f64) -> u64 {
    (epsilon * NANO).round() as u64
}

/// Rounds a debit amount up onto the ledger grid.
pub fn quantize_up(epsilon: f64) -> f64 {
    let scaled = epsilon * NANO;
    let r = scaled.round();
    let n = if (scaled - r).abs() < 1e-6 { r } else { scaled.ceil() };
    n / NANO
}

fn from_nano(n: u64) -> f64 {
    n as f64 / NANO
}

pub const DEFAULT_DELTA: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetAccount {
    pub initial_epsilon: f64,
    pub remaining_epsilon: f64,
    pub delta: f64,
}

impl BudgetAccount {
    pub fn new(epsilon: f64, delta: f64) -> Self {
        let e = from_nano(to_nano(epsilon));
        BudgetAccount { initial_epsilon: e, remaining_epsilon: e, delta }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebitEntry {
    /// Shared by all entries of one atomic debit.
    pub seq: u64,
    pub timestamp_ms: u64,
    pub user: String,
    pub dataset: String,
    pub plan_id: String,
    pub epsilon: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub dataset_budgets: BTreeMap<String, BudgetAccount>,
    pub user_budgets: BTreeMap<String, BudgetAccount>,
    pub debit_log: Vec<DebitEntry>,
    #[serde(default)]
    pub next_seq: u64,
}

impl BudgetLedger {
    pub fn set_dataset_budget(&mut self, dataset: &str, epsilon: f64, delta: f64) -> Result<(), CatalogError> {
        check_budget(epsilon, delta)?;
        self.dataset_budgets.insert(dataset.to_string(), BudgetAccount::new(epsilon, delta));
        Ok(())
    }

    pub fn set_user_budget(&mut self, user: &str, epsilon: f64, delta: f64) -> Result<(), CatalogError> {
        check_budget(epsilon, delta)?;
        self.user_budgets.insert(user.to_string(), BudgetAccount::new(epsilon, delta));
        Ok(())
    }

    pub fn dataset_remaining(&self, dataset: &str) -> Option<f64> {
        self.dataset_budgets.get(dataset).map(|a| a.remaining_epsilon)
    }

    pub fn user_remaining(&self, user: &str) -> Option<f64> {
        self.user_budgets.get(user).map(|a| a.remaining_epsilon)
    }

    /// Smallest remainder over the user and all listed datasets.
    pub fn remaining_for(&self, user: &str, datasets: &[String]) -> Result<f64, CatalogError> {
        let mut r = self.user_remaining(user).ok_or_else(|| CatalogError::UnknownUser(user.to_string()))?;
        for d in datasets {
            r = r.min(self.dataset_remaining(d).ok_or_else(|| CatalogError::UnknownDataset(d.clone()))?);
        }
        Ok(r)
    }

    pub fn debit(&mut self, dataset: &str, user: &str, epsilon: f64, plan_id: &str) -> Result<f64, CatalogError> {
        self.debit_many(&[dataset.to_string()], user, epsilon, plan_id).map(|(_, e)| e)
    }

    /// Debits `epsilon` from every listed dataset and once from the user,
    /// atomically. Returns the sequence number and the amount actually
    /// charged (rounded up onto the ledger grid).
    pub fn debit_many(
        &mut self,
        datasets: &[String],
        user: &str,
        epsilon: f64,
        plan_id: &str,
    ) -> Result<(u64, f64), CatalogError> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(CatalogError::InvalidEpsilon(epsilon));
        }
        let charge = to_nano(quantize_up(epsilon));
        let user_acc = self.user_budgets.get(user).ok_or_else(|| CatalogError::UnknownUser(user.to_string()))?;
        if to_nano(user_acc.remaining_epsilon) < charge {
            return Err(CatalogError::InsufficientBudget {
                holder: format!("user {user}"),
                requested: from_nano(charge),
                remaining: user_acc.remaining_epsilon,
            });
        }
        let mut unique: Vec<&String> = datasets.iter().collect();
        unique.sort();
        unique.dedup();
        for d in &unique {
            let acc = self.dataset_budgets.get(*d).ok_or_else(|| CatalogError::UnknownDataset((*d).clone()))?;
            if to_nano(acc.remaining_epsilon) < charge {
                return Err(CatalogError::InsufficientBudget {
                    holder: format!("dataset {d}"),
                    requested: from_nano(charge),
                    remaining: acc.remaining_epsilon,
                });
            }
        }
        let seq = self.next_seq;
        self.next_seq += 1;
        let timestamp_ms = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis() as u64)
            .unwrap_or(0);
        let user_acc = self.user_budgets.get_mut(user).expect("checked above");
        user_acc.remaining_epsilon = from_nano(to_nano(user_acc.remaining_epsilon) - charge);
        for d in unique {
            let acc = self.dataset_budgets.get_mut(d).expect("checked above");
            acc.remaining_epsilon = from_nano(to_nano(acc.remaining_epsilon) - charge);
            self.debit_log.push(DebitEntry {
                seq,
                timestamp_ms,
                user: user.to_string(),
                dataset: d.clone(),
                plan_id: plan_id.to_string(),
                epsilon: from_nano(charge),
            });
        }
        Ok((seq, from_nano(charge)))
    }

    /// Recomputes every remainder from the initial budgets and the log.
    pub fn replay(&self) -> (BTreeMap<String, f64>, BTreeMap<String, f64>) {
        let mut ds: BTreeMap<String, u64> =
            self.dataset_budgets.iter().map(|(k, a)| (k.clone(), to_nano(a.initial_epsilon))).collect();
        let mut us: BTreeMap<String, u64> =
            self.user_budgets.iter().map(|(k, a)| (k.clone(), to_nano(a.initial_epsilon))).collect();
        let mut seen = std::collections::BTreeSet::new();
        for e in &self.debit_log {
            if let Some(v) = ds.get_mut(&e.dataset) {
                *v -= to_nano(e.epsilon);
            }
            if seen.insert(e.seq) {
                if let Some(v) = us.get_mut(&e.user) {
                    *v -= to_nano(e.epsilon);
                }
            }
        }
        let f = |m: BTreeMap<String, u64>| m.into_iter().map(|(k, v)| (k, from_nano(v))).collect();
        (f(ds), f(us))
    }
}

fn check_budget(epsilon: f64, delta: f64) -> Result<(), CatalogError> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(CatalogError::InvalidEpsilon(epsilon));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(CatalogError::InvalidDelta(delta));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ledger(ds: f64, user: f64) -> BudgetLedger {
        let mut l = BudgetLedger::default();
        l.set_dataset_budget("D", ds, DEFAULT_DELTA).unwrap();
        l.set_user_budget("u", user, DEFAULT_DELTA).unwrap();
        l
    }

    #[test]
    fn simple_debit() {
        let mut l = ledger(10.0, 8.0);
        l.debit("D", "u", 3.0, "p").unwrap();
        assert_eq!(l.dataset_remaining("D"), Some(7.0));
        assert_eq!(l.user_remaining("u"), Some(5.0));
    }

    #[test]
    fn zero_debit_is_logged() {
        let mut l = ledger(10.0, 8.0);
        l.debit("D", "u", 0.0, "p").unwrap();
        assert_eq!(l.dataset_remaining("D"), Some(10.0));
        assert_eq!(l.debit_log.len(), 1);
    }

    #[test]
    fn insufficient_budget_is_atomic() {
        let mut l = ledger(2.0, 8.0);
        let before = l.clone();
        assert!(matches!(l.debit("D", "u", 3.0, "p"), Err(CatalogError::InsufficientBudget { .. })));
        assert_eq!(l, before);
    }

    #[test]
    fn replay_matches_remaining() {
        let mut l = ledger(10.0, 10.0);
        for e in [0.1, 0.2, 0.3, 1.0 / 3.0] {
            l.debit("D", "u", e, "p").unwrap();
        }
        let (ds, us) = l.replay();
        assert_eq!(ds["D"], l.dataset_remaining("D").unwrap());
        assert_eq!(us["u"], l.user_remaining("u").unwrap());
    }
}
