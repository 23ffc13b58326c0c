#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use chrono::NaiveDate;
use conceptpath::kgstore::{
    load_workspace, Concept, ConceptEdge, ConceptTable, JournalAction, ReviewKind, Source, Store, Work,
};
use conceptpath::pipeline::{
    parse_relations, Backend, BackendError, BackendRequest, BackendResponse, ExpertDecision, ScriptEntry,
    ScriptedExpert, ScriptedMock, Segment, Stage,
};
use conceptpath::text::{normalize_name, similarity};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub mod oracles;

pub fn fixture(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(rel)
}

pub fn corpus_dir() -> PathBuf {
    fixture("corpus")
}

pub fn corpus_store() -> Store {
    load_workspace(corpus_dir().join("workspace")).expect("fixture workspace loads")
}

pub fn gold_script() -> ScriptedMock {
    ScriptedMock::from_jsonl(&corpus_dir().join("gold_script.jsonl")).expect("gold script")
}

/// Approves every refinement item it is asked about.
pub fn refinement_approver() -> ScriptedExpert {
    ScriptedExpert::new().always(ReviewKind::Refinement, JournalAction::Approve)
}

pub fn seed_of(parts: &[&str]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0]);
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

fn input_line<'a>(input: &'a str, prefix: &str) -> Option<&'a str> {
    input.lines().find_map(|l| l.strip_prefix(prefix))
}

fn same_name(a: &str, b: &str) -> bool {
    let (a, b) = (normalize_name(a), normalize_name(b));
    a == b || similarity(&a, &b) >= 0.85
}

fn relations_text(rows: &[(String, String)]) -> String {
    let body: Vec<[&str; 3]> = rows.iter().map(|(p, c)| [p.as_str(), "is-a", c.as_str()]).collect();
    format!(
        "<concept_relations>{}</concept_relations>",
        serde_json::to_string(&body).unwrap()
    )
}

fn listed_pairs(input: &str) -> Vec<(String, String)> {
    let list = input_line(input, "Pairs: ").expect("relations input lists pairs");
    let rows: Vec<[String; 2]> = serde_json::from_str(list).expect("pair list is JSON");
    rows.into_iter().map(|[a, b]| (a, b)).collect()
}

#[derive(Default)]
struct OracleWork {
    segmentation: String,
    pairs: BTreeMap<Segment, String>,
    relations: Vec<(String, String)>,
    refinements: Vec<(String, String, String)>,
}

/// Answers every stage from the fixture gold, independent of call order.
/// Refinement proposals are made the first time their edge is shown.
pub struct GoldOracle {
    works: HashMap<String, OracleWork>,
    proposed: Mutex<HashSet<(String, String, String)>>,
}

#[derive(serde::Deserialize)]
struct RefinementRow {
    work_id: String,
    parent: String,
    child: String,
    response: String,
}

impl GoldOracle {
    pub fn load() -> Self {
        let mut works: HashMap<String, OracleWork> = HashMap::new();
        let text = fs::read_to_string(corpus_dir().join("gold_script.jsonl")).unwrap();
        let mut pair_calls: HashMap<String, usize> = HashMap::new();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let e: ScriptEntry = serde_json::from_str(line).unwrap();
            let wid = e.work_id.clone().unwrap();
            let w = works.entry(wid.clone()).or_default();
            match e.stage {
                Stage::Segmentation => w.segmentation = e.response,
                Stage::Pairs => {
                    let n = pair_calls.entry(wid).or_default();
                    w.pairs.insert(Segment::ALL[*n], e.response);
                    *n += 1;
                }
                Stage::Relations => w
                    .relations
                    .extend(parse_relations(&e.response, Stage::Relations).unwrap()),
                _ => {}
            }
        }
        let text = fs::read_to_string(corpus_dir().join("gold_refinements.jsonl")).unwrap();
        for line in text.lines().filter(|l| !l.is_empty()) {
            let r: RefinementRow = serde_json::from_str(line).unwrap();
            works
                .entry(r.work_id)
                .or_default()
                .refinements
                .push((r.parent, r.child, r.response));
        }
        GoldOracle {
            works,
            proposed: Mutex::new(HashSet::new()),
        }
    }
}

impl Backend for GoldOracle {
    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let w = &self.works[&req.work_id];
        let text = match req.stage {
            Stage::Segmentation => w.segmentation.clone(),
            Stage::Pairs => {
                let tag = input_line(&req.input, "Segment: ").unwrap();
                let seg = Segment::ALL.into_iter().find(|s| s.tag() == tag).unwrap();
                w.pairs
                    .get(&seg)
                    .cloned()
                    .unwrap_or_else(|| "<concept_pairs>[]</concept_pairs>".into())
            }
            Stage::Relations => {
                let listed = listed_pairs(&req.input);
                let rows: Vec<(String, String)> = w
                    .relations
                    .iter()
                    .filter(|(p, c)| {
                        listed
                            .iter()
                            .any(|(a, b)| (same_name(p, a) && same_name(c, b)) || (same_name(p, b) && same_name(c, a)))
                    })
                    .cloned()
                    .collect();
                relations_text(&rows)
            }
            Stage::Refinement => {
                let parent = input_line(&req.input, "Parent: ").unwrap();
                let child = input_line(&req.input, "Child: ").unwrap();
                let hit = w
                    .refinements
                    .iter()
                    .find(|(p, c, _)| same_name(p, parent) && same_name(c, child));
                match hit {
                    Some((p, c, resp)) => {
                        let fresh = self
                            .proposed
                            .lock()
                            .unwrap()
                            .insert((req.work_id.clone(), p.clone(), c.clone()));
                        if fresh {
                            resp.clone()
                        } else {
                            "[]".into()
                        }
                    }
                    None => "[]".into(),
                }
            }
            Stage::Direct => relations_text(&w.relations),
        };
        Ok(BackendResponse::text(text))
    }
}

/// Replaces the child of each relation row with a fabricated concept at the
/// given rate. Draws depend only on the seed and the request, so parallel
/// runs inject identically.
pub struct Noisy<B> {
    pub inner: B,
    pub seed: u64,
    pub rate: f64,
    injected: AtomicUsize,
}

impl<B: Backend> Noisy<B> {
    pub fn new(inner: B, seed: u64, rate: f64) -> Self {
        Noisy {
            inner,
            seed,
            rate,
            injected: AtomicUsize::new(0),
        }
    }

    pub fn injected(&self) -> usize {
        self.injected.load(Ordering::SeqCst)
    }
}

impl<B: Backend> Backend for Noisy<B> {
    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        let resp = self.inner.complete(req)?;
        if !matches!(req.stage, Stage::Relations | Stage::Direct) {
            return Ok(resp);
        }
        let Ok(rows) = parse_relations(&resp.text, req.stage) else {
            return Ok(resp);
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ seed_of(&[&req.work_id, &req.input]));
        let rows: Vec<(String, String)> = rows
            .into_iter()
            .map(|(p, c)| {
                if rng.gen_bool(self.rate) {
                    self.injected.fetch_add(1, Ordering::SeqCst);
                    (p, format!("Spurious topic {}", rng.gen_range(0..1_000_000)))
                } else {
                    (p, c)
                }
            })
            .collect();
        Ok(BackendResponse::text(relations_text(&rows)))
    }
}

/// Stage 4 always proposes something: a vocabulary or store concept, or a
/// fabricated one, with a random action.
pub struct Adversary<B> {
    pub inner: B,
    pub names: Vec<String>,
    seed: u64,
    calls: AtomicUsize,
    pub refinement_calls: AtomicUsize,
}

impl<B: Backend> Adversary<B> {
    pub fn new(inner: B, names: Vec<String>, seed: u64) -> Self {
        Adversary {
            inner,
            names,
            seed,
            calls: AtomicUsize::new(0),
            refinement_calls: AtomicUsize::new(0),
        }
    }
}

impl<B: Backend> Backend for Adversary<B> {
    fn complete(&self, req: &BackendRequest) -> Result<BackendResponse, BackendError> {
        if req.stage != Stage::Refinement {
            return self.inner.complete(req);
        }
        self.refinement_calls.fetch_add(1, Ordering::SeqCst);
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(n as u64));
        let name = if rng.gen_bool(0.2) {
            format!("Invented notion {}", rng.gen_range(0..100))
        } else {
            self.names
                .choose(&mut rng)
                .cloned()
                .unwrap_or_else(|| "Anything".into())
        };
        let action = ["add", "add", "delete", "keep"].choose(&mut rng).unwrap();
        Ok(BackendResponse::text(serde_json::to_string(&(name, action)).unwrap()))
    }
}

/// A random taxonomy plus works whose gold relations follow level order.
pub struct Synthetic {
    pub store: Store,
    pub relations: HashMap<String, Vec<(String, String)>>,
}

fn random_name(rng: &mut ChaCha8Rng) -> String {
    const SYL: [&str; 24] = [
        "ka", "lo", "mi", "ren", "tus", "va", "qor", "bel", "sim", "dra", "pho", "gen", "tal", "vex", "ru", "zan",
        "mor", "quil", "sep", "tor", "ny", "hal", "cri", "dou",
    ];
    let mut s = String::new();
    for _ in 0..rng.gen_range(3..5) {
        s.push_str(SYL.choose(rng).unwrap());
    }
    let mut c = s.chars();
    let first = c.next().unwrap().to_uppercase().collect::<String>();
    format!("{first}{} {}", c.as_str(), SYL.choose(rng).unwrap())
}

impl Synthetic {
    pub fn generate(seed: u64, concepts: usize, works: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = Store::new();
        let mut names: Vec<String> = Vec::new();
        while names.len() < concepts {
            let n = random_name(&mut rng);
            let clash = names.iter().any(|m| {
                normalize_name(m) == normalize_name(&n) || similarity(&normalize_name(m), &normalize_name(&n)) >= 0.85
            });
            if !clash {
                names.push(n);
            }
        }
        let mut by_level: BTreeMap<u32, Vec<String>> = BTreeMap::new();
        for (i, n) in names.iter().enumerate() {
            let level = (i % 4) as u32;
            let id = format!("S{i}");
            store
                .insert_concept(Concept::new(&id, n, level, Source::Openalex))
                .unwrap();
            by_level.entry(level).or_default().push(id);
        }
        let mut edges = Vec::new();
        for l in 1..4 {
            for child in &by_level[&l] {
                let parent = by_level[&(l - 1)].choose(&mut rng).unwrap();
                edges.push(ConceptEdge::new(parent, child, Source::Openalex));
            }
        }
        store.set_edges(edges).unwrap();

        let ids: Vec<String> = store.concepts().iter().map(|c| c.id.clone()).collect();
        let mut relations = HashMap::new();
        for w in 0..works {
            let wid = format!("F{w}");
            let k = rng.gen_range(3..8);
            let picked: Vec<String> = ids.choose_multiple(&mut rng, k).cloned().collect();
            let mut rows = Vec::new();
            for a in &picked {
                for b in &picked {
                    let (la, lb) = (store.concept(a).unwrap().level, store.concept(b).unwrap().level);
                    if la < lb && rng.gen_bool(0.5) {
                        rows.push((a.clone(), b.clone()));
                    }
                }
            }
            if rows.is_empty() {
                let mut sorted = picked.clone();
                sorted.sort_by_key(|id| store.concept(id).unwrap().level);
                let (a, b) = (sorted[0].clone(), sorted[sorted.len() - 1].clone());
                if store.concept(&a).unwrap().level < store.concept(&b).unwrap().level {
                    rows.push((a, b));
                }
            }
            let concept_ids: BTreeSet<String> = picked.iter().cloned().collect();
            store
                .insert_work(Work {
                    id: wid.clone(),
                    title: format!("Synthetic work {w}"),
                    abstract_text: format!("Background {w}. Method {w}. Finding {w}."),
                    publication_date: NaiveDate::from_ymd_opt(2020, 1, 1).unwrap(),
                    authors: vec!["A. Author".into()],
                    concept_ids,
                })
                .unwrap();
            relations.insert(wid, rows);
        }
        Synthetic { store, relations }
    }

    pub fn name(&self, id: &str) -> String {
        self.store.concept(id).unwrap().name.clone()
    }

    pub fn names(&self) -> Vec<String> {
        self.store.concepts().iter().map(|c| c.name.clone()).collect()
    }

    /// Backend that states the work's relations as pairs, orients every listed
    /// pair by level, and never proposes refinements.
    pub fn oracle(&self) -> impl Backend + '_ {
        move |req: &BackendRequest| -> Result<BackendResponse, BackendError> {
            let rows = &self.relations[&req.work_id];
            let text = match req.stage {
                Stage::Segmentation => {
                    "<related_research>Background.</related_research><research_methods>Method.</research_methods><conclusions>Finding.</conclusions>".to_string()
                }
                Stage::Pairs => {
                    let tag = input_line(&req.input, "Segment: ").unwrap();
                    let i = Segment::ALL.iter().position(|s| s.tag() == tag).unwrap();
                    let pairs: Vec<[String; 2]> = rows
                        .iter()
                        .enumerate()
                        .filter(|(k, _)| k % 3 == i)
                        .map(|(_, (p, c))| [self.name(p), self.name(c)])
                        .collect();
                    format!("<concept_pairs>{}</concept_pairs>", serde_json::to_string(&pairs).unwrap())
                }
                Stage::Relations => {
                    let level = |n: &str| self.store.concepts_named(n).first().map(|c| c.level);
                    let oriented: Vec<(String, String)> = listed_pairs(&req.input)
                        .into_iter()
                        .filter_map(|(a, b)| match (level(&a), level(&b)) {
                            (Some(la), Some(lb)) if la < lb => Some((a, b)),
                            (Some(la), Some(lb)) if lb < la => Some((b, a)),
                            _ => None,
                        })
                        .collect();
                    relations_text(&oriented)
                }
                Stage::Refinement => "[]".to_string(),
                Stage::Direct => relations_text(
                    &rows.iter().map(|(p, c)| (self.name(p), self.name(c))).collect::<Vec<_>>(),
                ),
            };
            Ok(BackendResponse::text(text))
        }
    }
}

pub fn approve_with(edit: Option<conceptpath::pipeline::ConceptEdit>) -> ExpertDecision {
    ExpertDecision {
        action: JournalAction::Approve,
        note: None,
        concept_edit: edit,
    }
}
