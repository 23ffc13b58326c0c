use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{clean_hierarchy, CleanReport, ConceptEdge, ConceptTable, Store, StoreError};

/// Cleaned hierarchy with a parent -> children index.
#[derive(Debug, Clone, Default)]
pub struct CleanedGraph {
    pub edges: Vec<ConceptEdge>,
    pub report: CleanReport,
    children: HashMap<String, Vec<String>>,
}

impl CleanedGraph {
    pub fn build<T: ConceptTable + ?Sized>(raw: &[ConceptEdge], concepts: &T) -> Result<Self, StoreError> {
        let cleaned = clean_hierarchy(raw, concepts)?;
        let mut children: HashMap<String, Vec<String>> = HashMap::new();
        for e in &cleaned.edges {
            children
                .entry(e.parent_id.clone())
                .or_default()
                .push(e.child_id.clone());
        }
        Ok(CleanedGraph {
            edges: cleaned.edges,
            report: cleaned.report,
            children,
        })
    }

    pub fn children(&self, id: &str) -> &[String] {
        self.children.get(id).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Concepts of one set together with the cleaned edges between them. Degree
/// queries answer relative to this view, not the global taxonomy.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SubgraphView {
    nodes: BTreeSet<String>,
    children: BTreeMap<String, Vec<String>>,
    in_degree: BTreeMap<String, usize>,
}

impl SubgraphView {
    /// Builds a view from explicit nodes and edges. Edges with an endpoint
    /// outside `nodes` are ignored.
    pub fn from_edges<'a>(
        nodes: impl IntoIterator<Item = String>,
        edges: impl IntoIterator<Item = (&'a str, &'a str)>,
    ) -> Self {
        let nodes: BTreeSet<String> = nodes.into_iter().collect();
        let mut children: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut in_degree: BTreeMap<String, usize> = nodes.iter().map(|n| (n.clone(), 0)).collect();
        for (p, c) in edges {
            if nodes.contains(p) && nodes.contains(c) {
                let kids = children.entry(p.to_string()).or_default();
                if !kids.iter().any(|k| k == c) {
                    kids.push(c.to_string());
                    *in_degree.get_mut(c).expect("node present") += 1;
                }
            }
        }
        for kids in children.values_mut() {
            kids.sort();
        }
        SubgraphView {
            nodes,
            children,
            in_degree,
        }
    }

    pub fn nodes(&self) -> &BTreeSet<String> {
        &self.nodes
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Edges in (parent, child) lexicographic order.
    pub fn edges(&self) -> Vec<(&str, &str)> {
        self.children
            .iter()
            .flat_map(|(p, kids)| kids.iter().map(move |c| (p.as_str(), c.as_str())))
            .collect()
    }

    pub fn children(&self, id: &str) -> &[String] {
        self.children.get(id).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn in_degree(&self, id: &str) -> usize {
        self.in_degree.get(id).copied().unwrap_or(0)
    }

    pub fn out_degree(&self, id: &str) -> usize {
        self.children(id).len()
    }

    pub fn sources(&self) -> impl Iterator<Item = &String> {
        self.nodes.iter().filter(|n| self.in_degree(n) == 0)
    }

    pub fn sinks(&self) -> impl Iterator<Item = &String> {
        self.nodes.iter().filter(|n| self.out_degree(n) == 0)
    }
}

/// Restricts the store's cleaned hierarchy to `ids`.
pub fn induced_subgraph<'a>(
    store: &Store,
    ids: impl IntoIterator<Item = &'a String>,
) -> Result<SubgraphView, StoreError> {
    let nodes: BTreeSet<String> = ids.into_iter().cloned().collect();
    if let Some(unknown) = nodes.iter().find(|id| !store.contains_concept(id)) {
        return Err(StoreError::UnknownConcept(unknown.clone()));
    }
    let graph = store.cleaned_graph()?;
    let edges: Vec<(&str, &str)> = nodes
        .iter()
        .flat_map(|p| {
            graph
                .children(p)
                .iter()
                .filter(|c| nodes.contains(*c))
                .map(move |c| (p.as_str(), c.as_str()))
        })
        .collect();
    Ok(SubgraphView::from_edges(nodes.iter().cloned(), edges))
}
