use std::sync::{Mutex, MutexGuard};

use serde::{Deserialize, Serialize};

use super::{BackendConfig, UsageRole};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UsageRecord {
    pub role: UsageRole,
    pub model: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_usd: f64,
}

impl UsageRecord {
    pub fn priced(role: UsageRole, config: &BackendConfig, prompt_tokens: u64, completion_tokens: u64) -> Self {
        UsageRecord {
            role,
            model: config.model.clone(),
            prompt_tokens,
            completion_tokens,
            cost_usd: config.cost_usd(prompt_tokens, completion_tokens),
        }
    }
}

/// Append-only usage store shared between concurrent calls.
///
/// Totals are summed in ascending cost order so they do not depend on the
/// order in which concurrent appends landed.
#[derive(Debug, Default)]
pub struct UsageLedger {
    records: Mutex<Vec<UsageRecord>>,
}

impl UsageLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> MutexGuard<'_, Vec<UsageRecord>> {
        // a poisoned ledger still holds valid records
        self.records.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn append(&self, record: UsageRecord) {
        self.lock().push(record);
    }

    /// Moves every record of `other` into this ledger.
    pub fn absorb(&self, other: &UsageLedger) {
        let drained: Vec<_> = other.lock().drain(..).collect();
        self.lock().extend(drained);
    }

    pub fn records(&self) -> Vec<UsageRecord> {
        self.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_cost(&self) -> f64 {
        ordered_sum(self.lock().iter().map(|r| r.cost_usd))
    }

    pub fn subtotal(&self, role: UsageRole) -> f64 {
        ordered_sum(self.lock().iter().filter(|r| r.role == role).map(|r| r.cost_usd))
    }

    pub fn count(&self, role: UsageRole) -> usize {
        self.lock().iter().filter(|r| r.role == role).count()
    }
}

fn ordered_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut v: Vec<f64> = values.collect();
    v.sort_by(f64::total_cmp);
    v.into_iter().fold(0.0, |acc, x| acc + x)
}
