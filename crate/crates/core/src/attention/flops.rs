//! Per-block FLOP accounting (one multiply-add counts as two).

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

/// Thread-safe accumulator of FLOP counts keyed by block label.
#[derive(Debug, Default)]
pub struct FlopLedger {
    entries: Mutex<BTreeMap<String, u64>>,
}

impl FlopLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, label: &str, flops: u64) {
        let mut e = self.entries.lock().expect("ledger lock");
        *e.entry(label.to_string()).or_insert(0) += flops;
    }

    pub fn is_empty(&self) -> bool {
        self.entries.lock().expect("ledger lock").is_empty()
    }

    pub fn entries(&self) -> Vec<FlopEntry> {
        self.entries
            .lock()
            .expect("ledger lock")
            .iter()
            .map(|(k, &v)| FlopEntry {
                label: k.clone(),
                flops: v,
            })
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.entries.lock().expect("ledger lock").values().sum()
    }

    /// Sum over labels starting with `prefix`.
    pub fn total_with_prefix(&self, prefix: &str) -> u64 {
        self.entries
            .lock()
            .expect("ledger lock")
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v)
            .sum()
    }

    pub fn clear(&self) {
        self.entries.lock().expect("ledger lock").clear();
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopEntry {
    pub label: String,
    pub flops: u64,
}
