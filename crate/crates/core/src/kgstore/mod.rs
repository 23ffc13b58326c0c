//! Persistent data model: concepts, is-a edges, works, paths, innovation
//! annotations and the expert review queue with its journal.
//!
//! A workspace is a directory of JSONL tables (see [`persist`]). In memory the
//! tables live in a [`Store`], which keeps lookup indexes and a lazily built
//! cleaned view of the hierarchy. [`SharedStore`] adds the snapshot protocol:
//! readers hold an immutable `Arc<Store>` while a writer publishes a new one.

mod clean;
pub mod persist;
mod review;
mod store;
mod subgraph;

use std::collections::BTreeSet;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use crate::text::normalize_name;

pub use clean::{clean_hierarchy, CleanReport, CleanedHierarchy};
pub use persist::{load_workspace, save_review_tables, save_workspace, WorkspaceMeta, SCHEMA_VERSION};
pub use review::{Actor, JournalAction, ReviewItem, ReviewJournalEntry, ReviewKind, ReviewState, TransitionError};
pub use store::{ConceptTable, SharedStore, Store, Violation};
pub use subgraph::{induced_subgraph, SubgraphView};

/// Where a concept or edge came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Openalex,
    Llm,
    Expert,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub name: String,
    pub normalized_name: String,
    /// Taxonomy depth; 0 is a root field such as "Physics".
    pub level: u32,
    pub source: Source,
}

impl Concept {
    pub fn new(id: impl Into<String>, name: impl Into<String>, level: u32, source: Source) -> Self {
        let name = name.into();
        Concept {
            id: id.into(),
            normalized_name: normalize_name(&name),
            name,
            level,
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Relation {
    #[serde(rename = "is-a")]
    IsA,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEdge {
    pub parent_id: String,
    pub child_id: String,
    pub relation: Relation,
    pub provenance: Source,
    pub validated: bool,
}

impl ConceptEdge {
    pub fn new(parent: impl Into<String>, child: impl Into<String>, provenance: Source) -> Self {
        ConceptEdge {
            parent_id: parent.into(),
            child_id: child.into(),
            relation: Relation::IsA,
            provenance,
            validated: false,
        }
    }

    pub fn key(&self) -> (&str, &str) {
        (&self.parent_id, &self.child_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Work {
    pub id: String,
    pub title: String,
    pub abstract_text: String,
    pub publication_date: NaiveDate,
    pub authors: Vec<String>,
    pub concept_ids: BTreeSet<String>,
}

impl Work {
    /// First completeness criterion the work fails, if any.
    pub fn missing_field(&self) -> Option<&'static str> {
        if self.abstract_text.trim().is_empty() {
            Some("abstract_text")
        } else if self.authors.iter().all(|a| a.trim().is_empty()) {
            Some("authors")
        } else if self.concept_ids.is_empty() {
            Some("concept_ids")
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnovationAnnotation {
    pub work_id: String,
    pub concept_id: String,
    pub annotator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{file}:{line}: malformed record{}: {message}", field.as_ref().map(|f| format!(" (field `{f}`)")).unwrap_or_default())]
    Malformed {
        file: String,
        line: usize,
        field: Option<String>,
        message: String,
    },
    #[error("workspace schema version {found} is not supported (expected {expected})")]
    SchemaMismatch { found: u32, expected: u32 },
    #[error("workspace failed validation with {} violation(s):\n{}", .0.len(), .0.iter().map(|v| format!("  {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Violation>),
    #[error("unknown concept id `{0}`")]
    UnknownConcept(String),
    #[error("unknown work id `{0}`")]
    UnknownWork(String),
    #[error("unknown review item `{0}`")]
    UnknownItem(String),
    #[error("duplicate {table} id `{id}`")]
    Duplicate { table: &'static str, id: String },
    #[error("edge {parent} -> {child} references unknown concept `{missing}`")]
    UnresolvedEdge {
        parent: String,
        child: String,
        missing: String,
    },
    #[error("work `{work}` is incomplete: missing {field}")]
    IncompleteWork { work: String, field: &'static str },
    #[error("annotation concept `{concept}` is not tagged on work `{work}`")]
    AnnotationOutsideWork { work: String, concept: String },
    #[error(transparent)]
    Transition(#[from] TransitionError),
}
