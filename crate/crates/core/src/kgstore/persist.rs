//! Workspace directory layout.
//!
//! ```text
//! concepts.jsonl  edges.jsonl  works.jsonl  paths.jsonl  annotations.jsonl
//! review_items.jsonl  review_journal.jsonl  pipeline_runs.jsonl  meta.json
//! ```
//!
//! One JSON object per line. A missing table file reads as an empty table.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::{Store, StoreError, Violation};

pub const SCHEMA_VERSION: u32 = 1;
const MAX_REPORTED_VIOLATIONS: usize = 20;

pub const CONCEPTS: &str = "concepts.jsonl";
pub const EDGES: &str = "edges.jsonl";
pub const WORKS: &str = "works.jsonl";
pub const PATHS: &str = "paths.jsonl";
pub const ANNOTATIONS: &str = "annotations.jsonl";
pub const REVIEW_ITEMS: &str = "review_items.jsonl";
pub const JOURNAL: &str = "review_journal.jsonl";
pub const RUNS: &str = "pipeline_runs.jsonl";
pub const META: &str = "meta.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkspaceMeta {
    pub schema_version: u32,
    pub created_at: DateTime<Utc>,
    /// Set once `edges.jsonl` holds a cleaned hierarchy.
    #[serde(default)]
    pub cleaned: bool,
}

impl Default for WorkspaceMeta {
    fn default() -> Self {
        WorkspaceMeta {
            schema_version: SCHEMA_VERSION,
            created_at: Utc::now(),
            cleaned: false,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Reads one table; returns the records with their 1-based line numbers.
fn read_table<T: DeserializeOwned>(dir: &Path, file: &'static str) -> Result<(Vec<T>, Vec<usize>), StoreError> {
    let path = dir.join(file);
    if !path.exists() {
        return Ok((Vec::new(), Vec::new()));
    }
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    let mut rows = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = serde_json::from_str(line).map_err(|e| {
            let message = e.to_string();
            StoreError::Malformed {
                file: file.to_string(),
                line: i + 1,
                field: field_in_message(&message),
                message,
            }
        })?;
        rows.push(row);
        lines.push(i + 1);
    }
    Ok((rows, lines))
}

/// serde names the offending field between backticks ("missing field `level`").
fn field_in_message(message: &str) -> Option<String> {
    if !message.contains("field") {
        return None;
    }
    let start = message.find('`')? + 1;
    let len = message[start..].find('`')?;
    Some(message[start..start + len].to_string())
}

/// Loads and validates a workspace directory.
pub fn load_workspace(dir: impl AsRef<Path>) -> Result<Store, StoreError> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(StoreError::Io {
            path: dir.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "workspace directory not found"),
        });
    }
    let meta_path = dir.join(META);
    let meta = if meta_path.exists() {
        let text = fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?;
        let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| StoreError::Malformed {
            file: META.to_string(),
            line: e.line(),
            field: None,
            message: e.to_string(),
        })?;
        // check the version before the shape so newer layouts report as a mismatch
        if let Some(found) = value.get("schema_version").and_then(|v| v.as_u64()) {
            if found != SCHEMA_VERSION as u64 {
                return Err(StoreError::SchemaMismatch {
                    found: found as u32,
                    expected: SCHEMA_VERSION,
                });
            }
        }
        serde_json::from_value::<WorkspaceMeta>(value).map_err(|e| {
            let message = e.to_string();
            StoreError::Malformed {
                file: META.to_string(),
                line: 1,
                field: field_in_message(&message),
                message,
            }
        })?
    } else {
        WorkspaceMeta::default()
    };

    let (concepts, concept_lines) = read_table(dir, CONCEPTS)?;
    let (edges, edge_lines) = read_table(dir, EDGES)?;
    let (works, work_lines) = read_table(dir, WORKS)?;
    let (paths, path_lines) = read_table(dir, PATHS)?;
    let (annotations, annotation_lines) = read_table(dir, ANNOTATIONS)?;
    let (items, item_lines) = read_table(dir, REVIEW_ITEMS)?;
    let (journal, journal_lines) = read_table(dir, JOURNAL)?;
    let (runs, run_lines) = read_table(dir, RUNS)?;

    let store = Store::from_tables(meta, concepts, edges, works, paths, annotations, items, journal, runs);
    let violations = store.validate();
    if violations.is_empty() {
        return Ok(store);
    }
    let line_of = |v: &Violation| {
        let lines = match v.file {
            CONCEPTS => &concept_lines,
            EDGES => &edge_lines,
            WORKS => &work_lines,
            PATHS => &path_lines,
            ANNOTATIONS => &annotation_lines,
            REVIEW_ITEMS => &item_lines,
            JOURNAL => &journal_lines,
            _ => &run_lines,
        };
        lines.get(v.record).copied()
    };
    Err(StoreError::Invalid(
        violations
            .into_iter()
            .take(MAX_REPORTED_VIOLATIONS)
            .map(|v| Violation { line: line_of(&v), ..v })
            .collect(),
    ))
}

fn write_atomic(dir: &Path, file: &str, contents: &[u8]) -> Result<(), StoreError> {
    let target = dir.join(file);
    let tmp: PathBuf = dir.join(format!(".{file}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(contents).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, &target).map_err(io_err(&target))
}

fn jsonl<T: Serialize>(rows: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for row in rows {
        serde_json::to_writer(&mut out, row).expect("in-memory serialization");
        out.push(b'\n');
    }
    out
}

/// Writes every table; each file is replaced atomically.
pub fn save_workspace(store: &Store, dir: impl AsRef<Path>) -> Result<(), StoreError> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_atomic(dir, CONCEPTS, &jsonl(store.concepts()))?;
    write_atomic(dir, EDGES, &jsonl(store.edges()))?;
    write_atomic(dir, WORKS, &jsonl(store.works()))?;
    write_atomic(dir, PATHS, &jsonl(store.paths()))?;
    write_atomic(dir, ANNOTATIONS, &jsonl(store.annotations()))?;
    write_atomic(dir, REVIEW_ITEMS, &jsonl(store.review_items()))?;
    write_atomic(dir, JOURNAL, &jsonl(store.journal()))?;
    write_atomic(dir, RUNS, &jsonl(store.runs()))?;
    let mut meta = serde_json::to_vec_pretty(store.meta()).expect("in-memory serialization");
    meta.push(b'\n');
    write_atomic(dir, META, &meta)
}

/// Writes only the review queue and its journal, for decision writes that
/// leave every other table untouched.
pub fn save_review_tables(store: &Store, dir: impl AsRef<Path>) -> Result<(), StoreError> {
    let dir = dir.as_ref();
    write_atomic(dir, REVIEW_ITEMS, &jsonl(store.review_items()))?;
    write_atomic(dir, JOURNAL, &jsonl(store.journal()))
}
