use std::collections::HashSet;

use serde::Serialize;

use super::{ConceptEdge, ConceptTable, StoreError};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct CleanReport {
    pub input: usize,
    pub kept: usize,
    pub self_loop: usize,
    pub intra_level: usize,
    /// Retained edges whose raw direction ran from the deeper concept upward.
    pub reoriented: usize,
    /// Edges that collapsed onto an already retained (parent, child) pair.
    pub duplicate: usize,
}

#[derive(Debug, Clone, Default)]
pub struct CleanedHierarchy {
    pub edges: Vec<ConceptEdge>,
    pub report: CleanReport,
}

/// Turns raw concept associations into a strict level-ordered hierarchy.
///
/// Self-loops and links between concepts on the same level are dropped. Every
/// retained edge points from the lower level value to the higher one no matter
/// which way the raw record ran, and a (parent, child) pair is kept once, at the
/// position of its first occurrence.
pub fn clean_hierarchy<T: ConceptTable + ?Sized>(
    raw: &[ConceptEdge],
    concepts: &T,
) -> Result<CleanedHierarchy, StoreError> {
    let mut report = CleanReport {
        input: raw.len(),
        ..CleanReport::default()
    };
    let mut seen: HashSet<(String, String)> = HashSet::new();
    let mut edges = Vec::new();

    for edge in raw {
        let level = |id: &str| {
            concepts.level_of(id).ok_or_else(|| StoreError::UnresolvedEdge {
                parent: edge.parent_id.clone(),
                child: edge.child_id.clone(),
                missing: id.to_string(),
            })
        };
        let parent_level = level(&edge.parent_id)?;
        let child_level = level(&edge.child_id)?;

        if edge.parent_id == edge.child_id {
            report.self_loop += 1;
            continue;
        }
        if parent_level == child_level {
            report.intra_level += 1;
            continue;
        }
        let mut kept = edge.clone();
        if parent_level > child_level {
            std::mem::swap(&mut kept.parent_id, &mut kept.child_id);
            report.reoriented += 1;
        }
        if !seen.insert((kept.parent_id.clone(), kept.child_id.clone())) {
            report.duplicate += 1;
            continue;
        }
        edges.push(kept);
    }
    report.kept = edges.len();
    Ok(CleanedHierarchy { edges, report })
}
