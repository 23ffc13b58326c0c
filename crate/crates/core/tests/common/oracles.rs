//! Independent reference computations shared by the property suites.

use std::collections::{BTreeMap, BTreeSet};

use chrono::NaiveDate;
use conceptpath::kgstore::{Concept, ConceptEdge, InnovationAnnotation, Source, Store, Work};
use conceptpath::paths::ConceptPath;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A store of `2..=12` concepts with random levels and random raw edges (some
/// written upside down, some intra-level), plus one work tagging a subset.
pub fn random_dag(rng: &mut ChaCha8Rng) -> (Store, Work) {
    let n = rng.gen_range(2..=12);
    let mut store = Store::new();
    for i in 0..n {
        store
            .insert_concept(Concept::new(
                format!("K{i:02}"),
                format!("Concept {i}"),
                rng.gen_range(0..5),
                Source::Openalex,
            ))
            .unwrap();
    }
    let density = rng.gen_range(0.1..0.6);
    for a in 0..n {
        for b in 0..n {
            if a != b && rng.gen_bool(density / 2.0) {
                store
                    .add_edge(ConceptEdge::new(
                        format!("K{a:02}"),
                        format!("K{b:02}"),
                        Source::Openalex,
                    ))
                    .unwrap();
            }
        }
    }
    let mut concept_ids: BTreeSet<String> = (0..n)
        .filter(|_| rng.gen_bool(0.8))
        .map(|i| format!("K{i:02}"))
        .collect();
    if concept_ids.is_empty() {
        concept_ids.insert("K00".into());
    }
    let work = Work {
        id: "W".into(),
        title: "t".into(),
        abstract_text: "a".into(),
        publication_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
        authors: vec!["x".into()],
        concept_ids,
    };
    store.insert_work(work.clone()).unwrap();
    (store, work)
}

fn oriented_edges(store: &Store, nodes: &BTreeSet<String>) -> BTreeSet<(String, String)> {
    let level: BTreeMap<&str, u32> = store.concepts().iter().map(|c| (c.id.as_str(), c.level)).collect();
    store
        .edges()
        .iter()
        .filter(|e| nodes.contains(&e.parent_id) && nodes.contains(&e.child_id))
        .filter(|e| level[e.parent_id.as_str()] != level[e.child_id.as_str()])
        .map(|e| {
            if level[e.parent_id.as_str()] < level[e.child_id.as_str()] {
                (e.parent_id.clone(), e.child_id.clone())
            } else {
                (e.child_id.clone(), e.parent_id.clone())
            }
        })
        .collect()
}

/// Every simple path from a node with no tagged parent to a node with no
/// tagged child, by exhaustive depth-first search.
pub fn brute_force_paths(store: &Store, work: &Work, singletons: bool) -> BTreeSet<Vec<String>> {
    let nodes = &work.concept_ids;
    let edges = oriented_edges(store, nodes);
    let has_parent = |n: &String| edges.iter().any(|(_, c)| c == n);
    let has_child = |n: &String| edges.iter().any(|(p, _)| p == n);

    fn walk(path: &mut Vec<String>, edges: &BTreeSet<(String, String)>, out: &mut BTreeSet<Vec<String>>) {
        let last = path.last().unwrap().clone();
        let next: Vec<&String> = edges.iter().filter(|(p, _)| *p == last).map(|(_, c)| c).collect();
        if next.is_empty() {
            out.insert(path.clone());
        }
        for c in next {
            if path.contains(c) {
                continue;
            }
            path.push(c.clone());
            walk(path, edges, out);
            path.pop();
        }
    }

    let mut out = BTreeSet::new();
    for s in nodes.iter().filter(|n| !has_parent(n)) {
        if !singletons && !has_child(s) {
            continue;
        }
        walk(&mut vec![s.clone()], &edges, &mut out);
    }
    out
}

/// Checks one path against the definition directly.
pub fn is_complete_path(store: &Store, work: &Work, path: &[String]) -> bool {
    let edges = oriented_edges(store, &work.concept_ids);
    let first = &path[0];
    let last = path.last().unwrap();
    path.iter().all(|n| work.concept_ids.contains(n))
        && path.windows(2).all(|w| edges.contains(&(w[0].clone(), w[1].clone())))
        && !edges.iter().any(|(_, c)| c == first)
        && !edges.iter().any(|(p, _)| p == last)
}

/// U of `a` by pairwise comparison, ties counting one half.
pub fn brute_u(a: &[f64], b: &[f64]) -> f64 {
    let mut u = 0.0;
    for x in a {
        for y in b {
            if x > y {
                u += 1.0;
            } else if x == y {
                u += 0.5;
            }
        }
    }
    u
}

/// Integer-valued sample, so ties are common.
pub fn tied_sample(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let spread = rng.gen_range(2..30);
    (0..n).map(|_| rng.gen_range(0..spread) as f64).collect()
}

pub fn power_law_points(coefficient: f64, exponent: f64, ranks: u64) -> Vec<(u64, f64)> {
    (1..=ranks)
        .map(|r| (r, coefficient * (r as f64).powf(exponent)))
        .collect()
}

pub fn random_text(rng: &mut ChaCha8Rng, tokens: usize) -> String {
    const WORDS: &[&str] = &[
        "the",
        "of",
        "graph",
        "a",
        "phase",
        "(n=12)",
        "superconducting",
        "results,",
        "we",
        "show",
        "that",
        "α-decay",
        "C++",
        "model.",
        "is",
        "the",
        "of",
        "in",
        "data;",
        "\"quoted\"",
    ];
    (0..tokens)
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join(" ")
}

/// Levels of the hand-built path fixture.
pub fn hand_levels() -> BTreeMap<String, Concept> {
    [("A", 0), ("B", 1), ("C", 2), ("D", 3), ("E", 4), ("F", 2)]
        .into_iter()
        .map(|(id, l)| (id.to_string(), Concept::new(id, id, l, Source::Openalex)))
        .collect()
}

/// Seven path instances over four works:
///
/// | work | nodes      | len | span |
/// |------|------------|-----|------|
/// | W1   | A B        | 2   | 0-1  |
/// | W1   | A B C      | 3   | 0-2  |
/// | W2   | A B        | 2   | 0-1  |
/// | W2   | B C D E    | 4   | 1-4  |
/// | W3   | F          | 1   | 2-2  |
/// | W3   | A B        | 2   | 0-1  |
/// | W4   | B C D E    | 4   | 1-4  |
pub fn hand_paths() -> Vec<ConceptPath> {
    let levels = hand_levels();
    [
        ("W1", "A B"),
        ("W1", "A B C"),
        ("W2", "A B"),
        ("W2", "B C D E"),
        ("W3", "F"),
        ("W3", "A B"),
        ("W4", "B C D E"),
    ]
    .into_iter()
    .map(|(w, nodes)| ConceptPath::from_nodes(w, nodes.split(' ').map(String::from).collect(), &levels).unwrap())
    .collect()
}

/// Innovation points: C in W1, E in W2, F in W3.
pub fn hand_annotations() -> Vec<InnovationAnnotation> {
    [("W1", "C"), ("W2", "E"), ("W3", "F")]
        .into_iter()
        .map(|(w, c)| InnovationAnnotation {
            work_id: w.into(),
            concept_id: c.into(),
            annotator: "hand".into(),
            note: None,
        })
        .collect()
}

/// (parent level, child level) of seven cleaned edges; gaps 1,1,1,1,2,3,3.
pub const HAND_EDGE_LEVELS: [(u32, u32); 7] = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 2), (2, 5), (1, 4)];
