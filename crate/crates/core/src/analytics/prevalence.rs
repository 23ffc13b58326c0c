use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::AnalyticsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ItemKind {
    Concept,
    Path,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Low,
    High,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrevalenceRecord {
    pub item_key: String,
    pub kind: ItemKind,
    pub frequency: u64,
    pub prevalence: f64,
    pub region: Region,
}

/// `ln(1 + frequency)`, natural log.
pub fn prevalence(frequency: u64) -> f64 {
    (frequency as f64).ln_1p()
}

/// Median of the prevalences (mean of the two central values for even n).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

/// Assigns regions by the median prevalence: strictly below is low, the rest
/// (ties included) high. Returns the threshold.
pub fn median_split(records: &mut [PrevalenceRecord]) -> Result<f64, AnalyticsError> {
    let values: Vec<f64> = records.iter().map(|r| r.prevalence).collect();
    let threshold = median(&values).ok_or(AnalyticsError::Empty("median_split"))?;
    for r in records.iter_mut() {
        r.region = if r.prevalence < threshold {
            Region::Low
        } else {
            Region::High
        };
    }
    Ok(threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrevalenceTable {
    pub records: Vec<PrevalenceRecord>,
    /// Absent when there are no items.
    pub threshold: Option<f64>,
}

impl PrevalenceTable {
    pub fn get(&self, key: &str) -> Option<&PrevalenceRecord> {
        self.records
            .binary_search_by(|r| r.item_key.as_str().cmp(key))
            .ok()
            .map(|i| &self.records[i])
    }
}

/// One record per distinct item, ordered by key, regions already assigned.
pub fn prevalence_table(counts: &BTreeMap<String, u64>, kind: ItemKind) -> PrevalenceTable {
    let mut records: Vec<PrevalenceRecord> = counts
        .iter()
        .map(|(k, &f)| PrevalenceRecord {
            item_key: k.clone(),
            kind,
            frequency: f,
            prevalence: prevalence(f),
            region: Region::High,
        })
        .collect();
    let threshold = median_split(&mut records).ok();
    PrevalenceTable { records, threshold }
}
