use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::{Arc, Mutex, OnceLock, RwLock};

use chrono::{DateTime, Utc};
use serde_json::Value;

use super::subgraph::CleanedGraph;
use super::{
    Actor, Concept, ConceptEdge, InnovationAnnotation, JournalAction, ReviewItem, ReviewJournalEntry, StoreError,
    TransitionError, Work, WorkspaceMeta,
};
use crate::paths::ConceptPath;
use crate::pipeline::WorkRun;
use crate::text::normalize_name;

/// Anything that can resolve a concept id.
pub trait ConceptTable {
    fn concept(&self, id: &str) -> Option<&Concept>;

    fn level_of(&self, id: &str) -> Option<u32> {
        self.concept(id).map(|c| c.level)
    }
}

impl ConceptTable for BTreeMap<String, Concept> {
    fn concept(&self, id: &str) -> Option<&Concept> {
        self.get(id)
    }
}

impl ConceptTable for HashMap<String, Concept> {
    fn concept(&self, id: &str) -> Option<&Concept> {
        self.get(id)
    }
}

/// One broken invariant found while validating a workspace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub file: &'static str,
    /// Zero-based record position within the table.
    pub record: usize,
    /// One-based line in the backing file, when known.
    pub line: Option<usize>,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.line {
            Some(line) => write!(f, "{}:{}: {}", self.file, line, self.message),
            None => write!(f, "{}[{}]: {}", self.file, self.record, self.message),
        }
    }
}

/// In-memory tables plus indexes. Cloning is a deep copy.
#[derive(Debug, Clone, Default)]
pub struct Store {
    pub(crate) meta: WorkspaceMeta,
    concepts: Vec<Concept>,
    concept_index: HashMap<String, usize>,
    name_index: HashMap<String, Vec<usize>>,
    edges: Vec<ConceptEdge>,
    cleaned: OnceLock<Arc<CleanedGraph>>,
    works: Vec<Work>,
    work_index: HashMap<String, usize>,
    paths: Vec<ConceptPath>,
    annotations: Vec<InnovationAnnotation>,
    items: Vec<ReviewItem>,
    item_index: HashMap<String, usize>,
    journal: Vec<ReviewJournalEntry>,
    runs: Vec<WorkRun>,
    run_index: HashMap<String, usize>,
}

impl ConceptTable for Store {
    fn concept(&self, id: &str) -> Option<&Concept> {
        self.concept_index.get(id).map(|&i| &self.concepts[i])
    }
}

impl Store {
    pub fn new() -> Self {
        Store::default()
    }

    pub fn meta(&self) -> &WorkspaceMeta {
        &self.meta
    }

    pub fn meta_mut(&mut self) -> &mut WorkspaceMeta {
        &mut self.meta
    }

    // ---- concepts -------------------------------------------------------

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn contains_concept(&self, id: &str) -> bool {
        self.concept_index.contains_key(id)
    }

    /// Concepts whose normalized name equals `normalize_name(name)`.
    pub fn concepts_named(&self, name: &str) -> Vec<&Concept> {
        self.name_index
            .get(&normalize_name(name))
            .map(|ix| ix.iter().map(|&i| &self.concepts[i]).collect())
            .unwrap_or_default()
    }

    pub fn insert_concept(&mut self, concept: Concept) -> Result<(), StoreError> {
        if self.concept_index.contains_key(&concept.id) {
            return Err(StoreError::Duplicate {
                table: "concept",
                id: concept.id,
            });
        }
        self.push_concept(concept);
        Ok(())
    }

    /// Inserts or replaces by id. Returns true when the id was new.
    pub fn upsert_concept(&mut self, concept: Concept) -> bool {
        match self.concept_index.get(&concept.id) {
            Some(&i) => {
                if self.concepts[i] != concept {
                    let old = std::mem::replace(&mut self.concepts[i], concept);
                    if let Some(ix) = self.name_index.get_mut(&old.normalized_name) {
                        ix.retain(|&j| j != i);
                    }
                    self.name_index
                        .entry(self.concepts[i].normalized_name.clone())
                        .or_default()
                        .push(i);
                    self.cleaned = OnceLock::new();
                }
                false
            }
            None => {
                self.push_concept(concept);
                true
            }
        }
    }

    fn push_concept(&mut self, concept: Concept) {
        let i = self.concepts.len();
        self.concept_index.insert(concept.id.clone(), i);
        self.name_index
            .entry(concept.normalized_name.clone())
            .or_default()
            .push(i);
        self.concepts.push(concept);
    }

    // ---- edges ----------------------------------------------------------

    pub fn edges(&self) -> &[ConceptEdge] {
        &self.edges
    }

    /// Appends a raw edge; both endpoints must resolve.
    pub fn add_edge(&mut self, edge: ConceptEdge) -> Result<(), StoreError> {
        self.check_endpoints(&edge)?;
        self.edges.push(edge);
        self.cleaned = OnceLock::new();
        Ok(())
    }

    /// Adds the edge unless the (parent, child) pair already exists, in which
    /// case the stored copy is marked validated when the new one is.
    pub fn upsert_edge(&mut self, edge: ConceptEdge) -> Result<bool, StoreError> {
        self.check_endpoints(&edge)?;
        if let Some(existing) = self.edges.iter_mut().find(|e| e.key() == edge.key()) {
            existing.validated |= edge.validated;
            return Ok(false);
        }
        self.edges.push(edge);
        self.cleaned = OnceLock::new();
        Ok(true)
    }

    pub fn set_edges(&mut self, edges: Vec<ConceptEdge>) -> Result<(), StoreError> {
        for e in &edges {
            self.check_endpoints(e)?;
        }
        self.edges = edges;
        self.cleaned = OnceLock::new();
        Ok(())
    }

    fn check_endpoints(&self, edge: &ConceptEdge) -> Result<(), StoreError> {
        for id in [&edge.parent_id, &edge.child_id] {
            if !self.contains_concept(id) {
                return Err(StoreError::UnresolvedEdge {
                    parent: edge.parent_id.clone(),
                    child: edge.child_id.clone(),
                    missing: id.clone(),
                });
            }
        }
        Ok(())
    }

    /// Cleaned, level-ordered view of the stored edges with a child index.
    pub fn cleaned_graph(&self) -> Result<Arc<CleanedGraph>, StoreError> {
        if let Some(g) = self.cleaned.get() {
            return Ok(g.clone());
        }
        let g = Arc::new(CleanedGraph::build(&self.edges, self)?);
        let _ = self.cleaned.set(g.clone());
        Ok(g)
    }

    // ---- works ----------------------------------------------------------

    pub fn works(&self) -> &[Work] {
        &self.works
    }

    pub fn work(&self, id: &str) -> Option<&Work> {
        self.work_index.get(id).map(|&i| &self.works[i])
    }

    pub fn insert_work(&mut self, work: Work) -> Result<(), StoreError> {
        if self.work_index.contains_key(&work.id) {
            return Err(StoreError::Duplicate {
                table: "work",
                id: work.id,
            });
        }
        self.check_work(&work)?;
        self.work_index.insert(work.id.clone(), self.works.len());
        self.works.push(work);
        Ok(())
    }

    pub fn upsert_work(&mut self, work: Work) -> Result<(), StoreError> {
        self.check_work(&work)?;
        match self.work_index.get(&work.id) {
            Some(&i) => self.works[i] = work,
            None => {
                self.work_index.insert(work.id.clone(), self.works.len());
                self.works.push(work);
            }
        }
        Ok(())
    }

    fn check_work(&self, work: &Work) -> Result<(), StoreError> {
        if let Some(field) = work.missing_field() {
            return Err(StoreError::IncompleteWork {
                work: work.id.clone(),
                field,
            });
        }
        if let Some(missing) = work.concept_ids.iter().find(|c| !self.contains_concept(c)) {
            return Err(StoreError::UnknownConcept(missing.clone()));
        }
        Ok(())
    }

    /// Removes a work together with its paths, annotations and pipeline run.
    /// Review items and journal entries stay: the journal is append-only.
    pub fn remove_work(&mut self, id: &str) -> Result<Work, StoreError> {
        let i = *self
            .work_index
            .get(id)
            .ok_or_else(|| StoreError::UnknownWork(id.to_string()))?;
        let work = self.works.remove(i);
        self.work_index = index_by(&self.works, |w| &w.id);
        self.annotations.retain(|a| a.work_id != id);
        self.paths.retain(|p| p.work_id != id);
        self.runs.retain(|r| r.work_id != id);
        self.run_index = index_by(&self.runs, |r| &r.work_id);
        Ok(work)
    }

    // ---- paths ----------------------------------------------------------

    pub fn paths(&self) -> &[ConceptPath] {
        &self.paths
    }

    pub fn set_paths(&mut self, paths: Vec<ConceptPath>) {
        self.paths = paths;
    }

    /// Replaces the stored paths of one work, keeping work-id order stable.
    pub fn replace_work_paths(&mut self, work_id: &str, paths: Vec<ConceptPath>) {
        self.paths.retain(|p| p.work_id != work_id);
        self.paths.extend(paths);
        self.paths
            .sort_by(|a, b| a.work_id.cmp(&b.work_id).then_with(|| a.nodes.cmp(&b.nodes)));
    }

    // ---- annotations ----------------------------------------------------

    pub fn annotations(&self) -> &[InnovationAnnotation] {
        &self.annotations
    }

    pub fn add_annotation(&mut self, annotation: InnovationAnnotation) -> Result<(), StoreError> {
        let work = self
            .work(&annotation.work_id)
            .ok_or_else(|| StoreError::UnknownWork(annotation.work_id.clone()))?;
        if !work.concept_ids.contains(&annotation.concept_id) {
            return Err(StoreError::AnnotationOutsideWork {
                work: annotation.work_id,
                concept: annotation.concept_id,
            });
        }
        self.annotations.push(annotation);
        Ok(())
    }

    // ---- review queue and journal ---------------------------------------

    pub fn review_items(&self) -> &[ReviewItem] {
        &self.items
    }

    pub fn review_item(&self, id: &str) -> Option<&ReviewItem> {
        self.item_index.get(id).map(|&i| &self.items[i])
    }

    /// Adds the item unless one with the same id exists; returns the stored one.
    pub fn enqueue(&mut self, item: ReviewItem) -> &ReviewItem {
        let i = match self.item_index.get(&item.id) {
            Some(&i) => i,
            None => {
                let i = self.items.len();
                self.item_index.insert(item.id.clone(), i);
                self.items.push(item);
                i
            }
        };
        &self.items[i]
    }

    /// Moves a pending item to its decided state and journals the decision.
    pub fn decide(
        &mut self,
        item_id: &str,
        actor: Actor,
        action: JournalAction,
        payload: Value,
        now: DateTime<Utc>,
    ) -> Result<&ReviewItem, StoreError> {
        let i = *self
            .item_index
            .get(item_id)
            .ok_or_else(|| StoreError::UnknownItem(item_id.to_string()))?;
        let item = &mut self.items[i];
        if !item.is_pending() {
            return Err(TransitionError::AlreadyDecided {
                id: item.id.clone(),
                state: item.state,
            }
            .into());
        }
        if !item.kind.allows(action) {
            return Err(TransitionError::IllegalAction {
                kind: item.kind.as_str(),
                action: action.as_str(),
            }
            .into());
        }
        item.state = action.resulting_state();
        item.decided_at = Some(now);
        self.journal.push(ReviewJournalEntry {
            item_id: item_id.to_string(),
            timestamp: now,
            actor,
            action,
            payload,
        });
        Ok(&self.items[i])
    }

    pub fn journal(&self) -> &[ReviewJournalEntry] {
        &self.journal
    }

    /// Decision journaled for an item, if it has been decided.
    pub fn decision_for(&self, item_id: &str) -> Option<&ReviewJournalEntry> {
        self.journal.iter().rev().find(|e| e.item_id == item_id)
    }

    // ---- pipeline runs --------------------------------------------------

    pub fn runs(&self) -> &[WorkRun] {
        &self.runs
    }

    pub fn run(&self, work_id: &str) -> Option<&WorkRun> {
        self.run_index.get(work_id).map(|&i| &self.runs[i])
    }

    pub fn upsert_run(&mut self, run: WorkRun) {
        match self.run_index.get(&run.work_id) {
            Some(&i) => self.runs[i] = run,
            None => {
                self.run_index.insert(run.work_id.clone(), self.runs.len());
                self.runs.push(run);
            }
        }
    }

    // ---- bulk construction used by the loader ----------------------------

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn from_tables(
        meta: WorkspaceMeta,
        concepts: Vec<Concept>,
        edges: Vec<ConceptEdge>,
        works: Vec<Work>,
        paths: Vec<ConceptPath>,
        annotations: Vec<InnovationAnnotation>,
        items: Vec<ReviewItem>,
        journal: Vec<ReviewJournalEntry>,
        runs: Vec<WorkRun>,
    ) -> Store {
        let mut store = Store {
            meta,
            edges,
            work_index: index_by(&works, |w| &w.id),
            works,
            paths,
            annotations,
            item_index: index_by(&items, |i| &i.id),
            items,
            journal,
            run_index: index_by(&runs, |r| &r.work_id),
            runs,
            ..Store::default()
        };
        for c in concepts {
            // duplicates are reported by validate(); keep the first for lookups
            if store.concept_index.contains_key(&c.id) {
                store.concepts.push(c);
                continue;
            }
            store.push_concept(c);
        }
        store
    }

    /// Every type invariant that can be checked from the tables alone.
    pub fn validate(&self) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut push = |file: &'static str, record: usize, message: String| {
            out.push(Violation {
                file,
                record,
                line: None,
                message,
            })
        };

        let mut seen = HashSet::new();
        for (i, c) in self.concepts.iter().enumerate() {
            if !seen.insert(c.id.as_str()) {
                push("concepts.jsonl", i, format!("duplicate concept id `{}`", c.id));
            }
            let expected = normalize_name(&c.name);
            if c.normalized_name != expected {
                push(
                    "concepts.jsonl",
                    i,
                    format!(
                        "normalized_name `{}` does not match `{}` derived from name",
                        c.normalized_name, expected
                    ),
                );
            }
        }

        for (i, e) in self.edges.iter().enumerate() {
            for id in [&e.parent_id, &e.child_id] {
                if !self.contains_concept(id) {
                    push("edges.jsonl", i, format!("edge endpoint `{id}` is not a known concept"));
                }
            }
            if self.meta.cleaned {
                if let (Some(p), Some(c)) = (self.level_of(&e.parent_id), self.level_of(&e.child_id)) {
                    if e.parent_id == e.child_id || p >= c {
                        push(
                            "edges.jsonl",
                            i,
                            format!(
                                "cleaned edge {} -> {} breaks strict level order ({p} -> {c})",
                                e.parent_id, e.child_id
                            ),
                        );
                    }
                }
            }
        }

        let mut seen = HashSet::new();
        for (i, w) in self.works.iter().enumerate() {
            if !seen.insert(w.id.as_str()) {
                push("works.jsonl", i, format!("duplicate work id `{}`", w.id));
            }
            if let Some(field) = w.missing_field() {
                push("works.jsonl", i, format!("work `{}` missing {field}", w.id));
            }
            for c in &w.concept_ids {
                if !self.contains_concept(c) {
                    push("works.jsonl", i, format!("work `{}` tags unknown concept `{c}`", w.id));
                }
            }
        }

        let edge_keys: HashSet<(&str, &str)> = self.edges.iter().map(|e| e.key()).collect();
        for (i, p) in self.paths.iter().enumerate() {
            if self.work(&p.work_id).is_none() {
                push(
                    "paths.jsonl",
                    i,
                    format!("path references unknown work `{}`", p.work_id),
                );
            }
            if let Err(msg) = p.check_shape(self, |a, b| edge_keys.contains(&(a, b))) {
                push("paths.jsonl", i, msg);
            }
        }

        for (i, a) in self.annotations.iter().enumerate() {
            match self.work(&a.work_id) {
                None => push(
                    "annotations.jsonl",
                    i,
                    format!("annotation on unknown work `{}`", a.work_id),
                ),
                Some(w) if !w.concept_ids.contains(&a.concept_id) => push(
                    "annotations.jsonl",
                    i,
                    format!("concept `{}` is not tagged on work `{}`", a.concept_id, a.work_id),
                ),
                _ => {}
            }
        }

        let mut seen = HashSet::new();
        for (i, item) in self.items.iter().enumerate() {
            if !seen.insert(item.id.as_str()) {
                push(
                    "review_items.jsonl",
                    i,
                    format!("duplicate review item id `{}`", item.id),
                );
            }
            if item.is_pending() != item.decided_at.is_none() {
                push(
                    "review_items.jsonl",
                    i,
                    format!("item `{}` state {:?} disagrees with decided_at", item.id, item.state),
                );
            }
        }
        for (i, entry) in self.journal.iter().enumerate() {
            if self.review_item(&entry.item_id).is_none() {
                push(
                    "review_journal.jsonl",
                    i,
                    format!("journal entry references unknown item `{}`", entry.item_id),
                );
            }
        }

        let mut seen = HashSet::new();
        for (i, r) in self.runs.iter().enumerate() {
            if !seen.insert(r.work_id.as_str()) {
                push(
                    "pipeline_runs.jsonl",
                    i,
                    format!("duplicate run for work `{}`", r.work_id),
                );
            }
        }
        out
    }
}

fn index_by<T>(rows: &[T], key: impl Fn(&T) -> &String) -> HashMap<String, usize> {
    rows.iter().enumerate().map(|(i, r)| (key(r).clone(), i)).collect()
}

/// Snapshot-publishing handle: readers clone an `Arc<Store>`, a writer builds
/// the next version from a copy and swaps it in.
#[derive(Clone, Default)]
pub struct SharedStore {
    current: Arc<RwLock<Arc<Store>>>,
    writer: Arc<Mutex<()>>,
}

impl SharedStore {
    pub fn new(store: Store) -> Self {
        SharedStore {
            current: Arc::new(RwLock::new(Arc::new(store))),
            writer: Arc::new(Mutex::new(())),
        }
    }

    pub fn snapshot(&self) -> Arc<Store> {
        self.current.read().expect("store lock poisoned").clone()
    }

    /// Runs `f` against a private copy under the writer lock and publishes the
    /// copy only when `f` succeeds.
    pub fn write<R, E>(&self, f: impl FnOnce(&mut Store) -> Result<R, E>) -> Result<R, E> {
        let _guard = self.writer.lock().expect("writer lock poisoned");
        let mut next = (*self.snapshot()).clone();
        let out = f(&mut next)?;
        *self.current.write().expect("store lock poisoned") = Arc::new(next);
        Ok(out)
    }
}
