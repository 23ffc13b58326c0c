//! CSV series and the `report.json` scalar summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::Value;

use super::{AnalyticsError, PrevalenceRecord};
use crate::paths::{GapStats, LengthDistribution, SpanMatrix};

pub const REPORT_FILE: &str = "report.json";

fn writer(path: &Path) -> Result<csv::Writer<fs::File>, AnalyticsError> {
    Ok(csv::Writer::from_path(path)?)
}

/// `rank,concept_id,frequency`
pub fn write_rank_frequency(path: &Path, rows: &[(u64, String, u64)]) -> Result<(), AnalyticsError> {
    let mut w = writer(path)?;
    w.write_record(["rank", "concept_id", "frequency"])?;
    for (rank, id, freq) in rows {
        w.write_record([rank.to_string(), id.clone(), freq.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `item_key,kind,frequency,prevalence,region`
pub fn write_prevalence(path: &Path, records: &[PrevalenceRecord]) -> Result<(), AnalyticsError> {
    let mut w = writer(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// `x,density`
pub fn write_kde(path: &Path, series: &[(f64, f64)]) -> Result<(), AnalyticsError> {
    let mut w = writer(path)?;
    w.write_record(["x", "density"])?;
    for (x, d) in series {
        w.write_record([x.to_string(), d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `length,count`
pub fn write_lengths(path: &Path, dist: &LengthDistribution) -> Result<(), AnalyticsError> {
    let mut w = writer(path)?;
    w.write_record(["length", "count"])?;
    for (len, n) in &dist.histogram {
        w.write_record([len.to_string(), n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `start_level,end_level,count`
pub fn write_spans(path: &Path, m: &SpanMatrix) -> Result<(), AnalyticsError> {
    let mut w = writer(path)?;
    w.write_record(["start_level", "end_level", "count"])?;
    for (s, row) in &m.counts {
        for (e, n) in row {
            w.write_record([s.to_string(), e.to_string(), n.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `gap,count`
pub fn write_gaps(path: &Path, g: &GapStats) -> Result<(), AnalyticsError> {
    let mut w = writer(path)?;
    w.write_record(["gap", "count"])?;
    for (gap, n) in &g.histogram {
        w.write_record([gap.to_string(), n.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Scalar results keyed by statistic name. Successive analyses merge into the
/// same file; keys are kept sorted so reruns produce identical bytes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Report(pub BTreeMap<String, Value>);

impl Report {
    pub fn load(path: &Path) -> Result<Self, AnalyticsError> {
        if !path.exists() {
            return Ok(Report::default());
        }
        let text = fs::read_to_string(path)?;
        Ok(Report(serde_json::from_str(&text)?))
    }

    pub fn set(&mut self, key: &str, value: impl Into<Value>) {
        self.0.insert(key.to_string(), value.into());
    }

    pub fn set_opt(&mut self, key: &str, value: Option<f64>) {
        self.0
            .insert(key.to_string(), value.map(Value::from).unwrap_or(Value::Null));
    }

    pub fn get_f64(&self, key: &str) -> Option<f64> {
        self.0.get(key).and_then(Value::as_f64)
    }

    pub fn save(&self, path: &Path) -> Result<(), AnalyticsError> {
        let mut text = serde_json::to_string_pretty(&self.0)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}
