//! Prevalence of innovative versus other concepts and paths.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::{mann_whitney, prevalence_table, ItemKind, PrevalenceTable, RankTestResult, Region};
use crate::kgstore::{InnovationAnnotation, Store};
use crate::paths::ConceptPath;
use crate::share::Share;

/// Share of `items` (by key) that fall in the low region. Keys absent from the
/// table are ignored; `None` when no key is present.
pub fn region_share(table: &PrevalenceTable, items: &BTreeSet<String>) -> Option<Share> {
    let mut present = 0;
    let mut low = 0;
    for key in items {
        if let Some(r) = table.get(key) {
            present += 1;
            if r.region == Region::Low {
                low += 1;
            }
        }
    }
    Share::new(low, present)
}

/// Counts of each path key over all path instances.
pub fn path_frequencies(paths: &[ConceptPath]) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for p in paths {
        *counts.entry(p.key.clone()).or_insert(0) += 1;
    }
    counts
}

/// Number of works tagged with each concept.
pub fn concept_frequencies(store: &Store) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for w in store.works() {
        for c in &w.concept_ids {
            *counts.entry(c.clone()).or_insert(0) += 1;
        }
    }
    counts
}

fn annotated_pairs(annotations: &[InnovationAnnotation]) -> HashSet<(&str, &str)> {
    annotations
        .iter()
        .map(|a| (a.work_id.as_str(), a.concept_id.as_str()))
        .collect()
}

/// A path instance is innovative when one of its nodes is annotated as an
/// innovation point of the same work.
pub fn is_innovative(path: &ConceptPath, annotated: &HashSet<(&str, &str)>) -> bool {
    path.nodes
        .iter()
        .any(|n| annotated.contains(&(path.work_id.as_str(), n.as_str())))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InnovationRates {
    pub threshold: Option<f64>,
    pub low_paths: u64,
    pub high_paths: u64,
    pub innovative_low: u64,
    pub innovative_high: u64,
    /// Absent when the region holds no paths.
    pub rate_low: Option<Share>,
    pub rate_high: Option<Share>,
    pub share_of_innovative_in_low: Option<Share>,
}

/// Innovation rate per prevalence region over path instances.
pub fn innovation_rate(paths: &[ConceptPath], annotations: &[InnovationAnnotation]) -> InnovationRates {
    let table = prevalence_table(&path_frequencies(paths), ItemKind::Path);
    let annotated = annotated_pairs(annotations);
    let (mut low, mut high, mut inn_low, mut inn_high) = (0, 0, 0, 0);
    for p in paths {
        let region = table.get(&p.key).map(|r| r.region).unwrap_or(Region::High);
        let innovative = is_innovative(p, &annotated);
        match region {
            Region::Low => {
                low += 1;
                inn_low += innovative as u64;
            }
            Region::High => {
                high += 1;
                inn_high += innovative as u64;
            }
        }
    }
    InnovationRates {
        threshold: table.threshold,
        low_paths: low,
        high_paths: high,
        innovative_low: inn_low,
        innovative_high: inn_high,
        rate_low: Share::new(inn_low, low),
        rate_high: Share::new(inn_high, high),
        share_of_innovative_in_low: Share::new(inn_low, inn_low + inn_high),
    }
}

/// How comparison samples are drawn.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    /// One value per distinct concept or path key.
    #[default]
    DistinctItem,
    /// One value per (work, concept) tag or per path instance.
    PerOccurrence,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupComparison {
    pub innovative_n: usize,
    pub other_n: usize,
    pub low_share_innovative: Option<Share>,
    pub low_share_other: Option<Share>,
    /// Absent when either group is empty.
    pub test: Option<RankTestResult>,
    pub innovative_prevalence: Vec<f64>,
    pub other_prevalence: Vec<f64>,
}

fn compare(table: &PrevalenceTable, innovative: &[&str], other: &[&str]) -> GroupComparison {
    let pick = |keys: &[&str]| -> (Vec<f64>, Option<Share>) {
        let recs: Vec<_> = keys.iter().filter_map(|k| table.get(k)).collect();
        let low = recs.iter().filter(|r| r.region == Region::Low).count() as u64;
        (
            recs.iter().map(|r| r.prevalence).collect(),
            Share::new(low, recs.len() as u64),
        )
    };
    let (inn, inn_share) = pick(innovative);
    let (oth, oth_share) = pick(other);
    GroupComparison {
        innovative_n: inn.len(),
        other_n: oth.len(),
        low_share_innovative: inn_share,
        low_share_other: oth_share,
        test: mann_whitney(&inn, &oth).ok(),
        innovative_prevalence: inn,
        other_prevalence: oth,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoveltyReport {
    pub sampling: Sampling,
    pub concept_threshold: Option<f64>,
    pub path_threshold: Option<f64>,
    pub concepts: GroupComparison,
    pub paths: GroupComparison,
    pub innovation: InnovationRates,
}

/// Concept- and path-level comparison of innovative versus other items.
pub fn novelty_study(store: &Store, paths: &[ConceptPath], sampling: Sampling) -> NoveltyReport {
    let annotations = store.annotations();
    let annotated = annotated_pairs(annotations);
    let concept_table = prevalence_table(&concept_frequencies(store), ItemKind::Concept);
    let path_table = prevalence_table(&path_frequencies(paths), ItemKind::Path);

    let innovative_concepts: BTreeSet<&str> = annotations.iter().map(|a| a.concept_id.as_str()).collect();
    let innovative_keys: BTreeSet<&str> = paths
        .iter()
        .filter(|p| is_innovative(p, &annotated))
        .map(|p| p.key.as_str())
        .collect();

    let (concept_inn, concept_other, path_inn, path_other): (Vec<&str>, Vec<&str>, Vec<&str>, Vec<&str>) =
        match sampling {
            Sampling::DistinctItem => {
                let (ci, co) = concept_table
                    .records
                    .iter()
                    .map(|r| r.item_key.as_str())
                    .partition(|k| innovative_concepts.contains(k));
                let (pi, po) = path_table
                    .records
                    .iter()
                    .map(|r| r.item_key.as_str())
                    .partition(|k| innovative_keys.contains(k));
                (ci, co, pi, po)
            }
            Sampling::PerOccurrence => {
                let mut ci = Vec::new();
                let mut co = Vec::new();
                for w in store.works() {
                    for c in &w.concept_ids {
                        if annotated.contains(&(w.id.as_str(), c.as_str())) {
                            ci.push(c.as_str());
                        } else {
                            co.push(c.as_str());
                        }
                    }
                }
                let (pi, po) = paths
                    .iter()
                    .partition::<Vec<&ConceptPath>, _>(|p| is_innovative(p, &annotated));
                (
                    ci,
                    co,
                    pi.into_iter().map(|p| p.key.as_str()).collect(),
                    po.into_iter().map(|p| p.key.as_str()).collect(),
                )
            }
        };

    NoveltyReport {
        sampling,
        concept_threshold: concept_table.threshold,
        path_threshold: path_table.threshold,
        concepts: compare(&concept_table, &concept_inn, &concept_other),
        paths: compare(&path_table, &path_inn, &path_other),
        innovation: innovation_rate(paths, annotations),
    }
}
