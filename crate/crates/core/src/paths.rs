//! Complete root-to-leaf concept paths per work and their structural statistics.
//!
//! Roots and leaves are taken inside each work's induced subgraph: a path
//! starts at a tagged concept with no tagged parent and ends at one with no
//! tagged child. The output is the set of maximal source-to-sink paths, sorted
//! by node-id sequence, so any traversal order yields the same result.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kgstore::{induced_subgraph, ConceptTable, Store, StoreError, SubgraphView, Work};
use crate::share::Share;

/// Separator used in path keys. Concept ids never contain it.
pub const KEY_SEPARATOR: &str = ">";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptPath {
    pub work_id: String,
    pub nodes: Vec<String>,
    pub start_level: u32,
    pub end_level: u32,
    pub key: String,
}

pub fn path_key<S: AsRef<str>>(nodes: &[S]) -> String {
    nodes.iter().map(AsRef::as_ref).collect::<Vec<_>>().join(KEY_SEPARATOR)
}

impl ConceptPath {
    pub fn from_nodes<T: ConceptTable + ?Sized>(
        work_id: &str,
        nodes: Vec<String>,
        concepts: &T,
    ) -> Result<Self, StoreError> {
        let level = |id: &String| {
            concepts
                .level_of(id)
                .ok_or_else(|| StoreError::UnknownConcept(id.clone()))
        };
        let first = nodes.first().expect("paths have at least one node");
        let last = nodes.last().expect("paths have at least one node");
        Ok(ConceptPath {
            work_id: work_id.to_string(),
            start_level: level(first)?,
            end_level: level(last)?,
            key: path_key(&nodes),
            nodes,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Checks the record's internal shape: non-empty, known concepts, each hop
    /// an edge per `has_edge` with strictly increasing level, levels and key
    /// consistent with the nodes.
    pub fn check_shape<T: ConceptTable + ?Sized>(
        &self,
        concepts: &T,
        has_edge: impl Fn(&str, &str) -> bool,
    ) -> Result<(), String> {
        if self.nodes.is_empty() {
            return Err(format!("path of work `{}` has no nodes", self.work_id));
        }
        let mut levels = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            levels.push(
                concepts
                    .level_of(n)
                    .ok_or_else(|| format!("path node `{n}` is not a known concept"))?,
            );
        }
        for (w, l) in self.nodes.windows(2).zip(levels.windows(2)) {
            if !has_edge(&w[0], &w[1]) {
                return Err(format!("path hop {} -> {} is not an edge", w[0], w[1]));
            }
            if l[0] >= l[1] {
                return Err(format!("path hop {} -> {} does not descend in level", w[0], w[1]));
            }
        }
        if self.start_level != levels[0] || self.end_level != *levels.last().unwrap() {
            return Err(format!("path `{}` start/end levels disagree with its nodes", self.key));
        }
        if self.key != path_key(&self.nodes) {
            return Err(format!("path key `{}` does not match its nodes", self.key));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PathOptions {
    /// Emit isolated concepts (both source and sink) as length-1 paths.
    pub include_singletons: bool,
}

impl Default for PathOptions {
    fn default() -> Self {
        PathOptions {
            include_singletons: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PathError {
    #[error("hierarchy contains a cycle through `{0}`")]
    Cycle(String),
    #[error("edge {parent} -> {child} does not descend in level; clean the hierarchy first")]
    NotCleaned { parent: String, child: String },
    #[error(transparent)]
    Store(#[from] StoreError),
}

/// All maximal source-to-sink node sequences of `view`, sorted.
///
/// Suffixes are enumerated once per node and reused. A cycle is reported as
/// an error rather than looping.
pub fn maximal_paths(view: &SubgraphView, opts: PathOptions) -> Result<Vec<Vec<String>>, PathError> {
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Active,
        Done,
    }
    fn suffixes<'v>(
        view: &'v SubgraphView,
        node: &'v str,
        memo: &mut HashMap<&'v str, Vec<Vec<String>>>,
        marks: &mut HashMap<&'v str, Mark>,
    ) -> Result<(), PathError> {
        match marks.get(node) {
            Some(Mark::Done) => return Ok(()),
            Some(Mark::Active) => return Err(PathError::Cycle(node.to_string())),
            None => {}
        }
        marks.insert(node, Mark::Active);
        let kids = view.children(node);
        let mut out = Vec::new();
        if kids.is_empty() {
            out.push(vec![node.to_string()]);
        } else {
            for kid in kids {
                suffixes(view, kid, memo, marks)?;
                for tail in &memo[kid.as_str()] {
                    let mut p = Vec::with_capacity(tail.len() + 1);
                    p.push(node.to_string());
                    p.extend(tail.iter().cloned());
                    out.push(p);
                }
            }
        }
        memo.insert(node, out);
        marks.insert(node, Mark::Done);
        Ok(())
    }

    let mut memo = HashMap::new();
    let mut marks = HashMap::new();
    let mut paths = Vec::new();
    for source in view.sources() {
        if !opts.include_singletons && view.out_degree(source) == 0 {
            continue;
        }
        suffixes(view, source, &mut memo, &mut marks)?;
        paths.extend(memo[source.as_str()].iter().cloned());
    }
    // a cycle with no entry point has no source; walk the rest to surface it
    for node in view.nodes() {
        suffixes(view, node, &mut memo, &mut marks)?;
    }
    paths.sort();
    Ok(paths)
}

/// Complete concept paths of one work over the store's cleaned hierarchy.
pub fn enumerate_paths(work: &Work, store: &Store, opts: PathOptions) -> Result<Vec<ConceptPath>, PathError> {
    let view = induced_subgraph(store, &work.concept_ids)?;
    maximal_paths(&view, opts)?
        .into_iter()
        .map(|nodes| ConceptPath::from_nodes(&work.id, nodes, store).map_err(PathError::from))
        .collect()
}

/// Paths for every work, enumerated in parallel and merged in work-id order.
pub fn extract_all(store: &Store, opts: PathOptions) -> Result<Vec<ConceptPath>, PathError> {
    store.cleaned_graph()?;
    let mut works: Vec<&Work> = store.works().iter().collect();
    works.sort_by(|a, b| a.id.cmp(&b.id));
    let per_work: Vec<Vec<ConceptPath>> = works
        .par_iter()
        .map(|w| enumerate_paths(w, store, opts))
        .collect::<Result<_, _>>()?;
    Ok(per_work.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LengthDistribution {
    /// node count -> number of paths
    pub histogram: BTreeMap<usize, u64>,
    pub total: u64,
    /// Share of paths with 2 or 3 nodes; absent for empty input.
    pub share_len_2_3: Option<Share>,
}

pub fn path_length_distribution(paths: &[ConceptPath]) -> LengthDistribution {
    let mut histogram = BTreeMap::new();
    for p in paths {
        *histogram.entry(p.len()).or_insert(0u64) += 1;
    }
    let total = paths.len() as u64;
    let short = histogram.range(2..=3).map(|(_, c)| c).sum();
    LengthDistribution {
        histogram,
        total,
        share_len_2_3: Share::new(short, total),
    }
}

impl LengthDistribution {
    pub fn share_of(&self, len: usize) -> Option<Share> {
        Share::new(self.histogram.get(&len).copied().unwrap_or(0), self.total)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct SpanMatrix {
    /// start level -> end level -> path count
    pub counts: BTreeMap<u32, BTreeMap<u32, u64>>,
    pub total: u64,
    /// Share of paths that start and end within levels 0..=3.
    pub share_within_0_3: Option<Share>,
}

impl SpanMatrix {
    pub fn get(&self, start: u32, end: u32) -> u64 {
        self.counts.get(&start).and_then(|r| r.get(&end)).copied().unwrap_or(0)
    }
}

pub fn level_span_matrix(paths: &[ConceptPath]) -> SpanMatrix {
    let mut counts: BTreeMap<u32, BTreeMap<u32, u64>> = BTreeMap::new();
    let mut within = 0;
    for p in paths {
        *counts.entry(p.start_level).or_default().entry(p.end_level).or_insert(0) += 1;
        if p.end_level <= 3 {
            within += 1;
        }
    }
    let total = paths.len() as u64;
    SpanMatrix {
        counts,
        total,
        share_within_0_3: Share::new(within, total),
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct GapStats {
    /// level(child) - level(parent) -> edge count
    pub histogram: BTreeMap<u32, u64>,
    pub total: u64,
    pub share_gap_le_2: Option<Share>,
    /// Share of edges with at least one endpoint in levels 0..=2, which for a
    /// level-ordered edge means the parent sits there.
    pub share_levels_0_2: Option<Share>,
}

/// Level-gap statistics over cleaned edges given as `(parent_level, child_level)`.
pub fn edge_level_gap_stats(levels: impl IntoIterator<Item = (u32, u32)>) -> Result<GapStats, PathError> {
    let mut histogram = BTreeMap::new();
    let mut total = 0u64;
    let mut top = 0u64;
    for (p, c) in levels {
        if c <= p {
            return Err(PathError::NotCleaned {
                parent: format!("level {p}"),
                child: format!("level {c}"),
            });
        }
        *histogram.entry(c - p).or_insert(0u64) += 1;
        total += 1;
        if p <= 2 {
            top += 1;
        }
    }
    let le2 = histogram.range(..=2).map(|(_, n)| n).sum();
    Ok(GapStats {
        histogram,
        total,
        share_gap_le_2: Share::new(le2, total),
        share_levels_0_2: Share::new(top, total),
    })
}

/// Gap statistics of the store's cleaned hierarchy.
pub fn store_gap_stats(store: &Store) -> Result<GapStats, PathError> {
    let graph = store.cleaned_graph()?;
    let mut levels = Vec::with_capacity(graph.edges.len());
    for e in &graph.edges {
        let p = store
            .level_of(&e.parent_id)
            .ok_or_else(|| StoreError::UnknownConcept(e.parent_id.clone()))?;
        let c = store
            .level_of(&e.child_id)
            .ok_or_else(|| StoreError::UnknownConcept(e.child_id.clone()))?;
        levels.push((p, c));
    }
    edge_level_gap_stats(levels)
}
