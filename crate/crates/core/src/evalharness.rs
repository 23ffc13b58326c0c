//! Set-coverage precision/recall/F1 of predicted concepts, triplets and
//! paths against gold files, and the ablation runs that produce predictions.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kgstore::Store;
use crate::paths::path_key;
use crate::pipeline::{run_work, Ablation, Hierarchy, Matcher, PipelineContext, PipelineError, Resolution, RunStatus};

pub const GOLD_CONCEPTS_FILE: &str = "gold_concepts.jsonl";
pub const GOLD_PATHS_FILE: &str = "gold_paths.jsonl";
pub const REPORT_FILE: &str = "eval_report.json";
pub const REPORT_CSV: &str = "eval_report.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Concept,
    Triplet,
    Path,
}

impl Unit {
    pub const ALL: [Unit; 3] = [Unit::Concept, Unit::Triplet, Unit::Path];

    pub fn as_str(&self) -> &'static str {
        match self {
            Unit::Concept => "concept",
            Unit::Triplet => "triplet",
            Unit::Path => "path",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("gold {unit} set for work `{work}` is empty")]
    EmptyGold { work: String, unit: &'static str },
    #[error("gold references unknown work `{0}`")]
    UnknownWork(String),
    #[error("{configuration} needs review decisions for work `{work}` (items: {}) but no decision source answered", items.join(", "))]
    MissingDecisions {
        configuration: String,
        work: String,
        items: Vec<String>,
    },
    #[error("{file}:{line}: {message}")]
    Malformed { file: String, line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub pred: u64,
    pub gold: u64,
    pub hit: u64,
}

impl Counts {
    fn add(&mut self, other: Counts) {
        self.pred += other.pred;
        self.gold += other.gold;
        self.hit += other.hit;
    }

    /// (precision, recall, f1); precision is 0 for an empty prediction.
    pub fn prf(&self) -> (f64, f64, f64) {
        let p = if self.pred == 0 {
            0.0
        } else {
            self.hit as f64 / self.pred as f64
        };
        let r = if self.gold == 0 {
            0.0
        } else {
            self.hit as f64 / self.gold as f64
        };
        (p, r, f1(p, r))
    }
}

pub fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    pub pred_empty: bool,
}

/// Scores one prediction set against a non-empty gold set.
pub fn score<T: Ord>(pred: &BTreeSet<T>, gold: &BTreeSet<T>) -> Result<Score, EvalError> {
    if gold.is_empty() {
        return Err(EvalError::EmptyGold {
            work: String::new(),
            unit: "",
        });
    }
    let counts = Counts {
        pred: pred.len() as u64,
        gold: gold.len() as u64,
        hit: pred.intersection(gold).count() as u64,
    };
    let (precision, recall, f1) = counts.prf();
    Ok(Score {
        precision,
        recall,
        f1,
        counts,
        pred_empty: pred.is_empty(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkScore {
    pub work_id: String,
    #[serde(flatten)]
    pub score: Score,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub configuration: String,
    pub unit: Unit,
    /// Micro-averaged over pooled counts.
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub counts: Counts,
    pub pred_empty_works: usize,
    pub per_work: Vec<WorkScore>,
}

impl EvalReport {
    pub fn aggregate(configuration: &str, unit: Unit, per_work: Vec<WorkScore>) -> Self {
        let mut counts = Counts::default();
        for w in &per_work {
            counts.add(w.score.counts);
        }
        let (precision, recall, f1) = counts.prf();
        let n = per_work.len().max(1) as f64;
        let mean = |f: fn(&Score) -> f64| per_work.iter().map(|w| f(&w.score)).sum::<f64>() / n;
        EvalReport {
            configuration: configuration.to_string(),
            unit,
            precision,
            recall,
            f1,
            macro_precision: mean(|s| s.precision),
            macro_recall: mean(|s| s.recall),
            macro_f1: mean(|s| s.f1),
            counts,
            pred_empty_works: per_work.iter().filter(|w| w.score.pred_empty).count(),
            per_work,
        }
    }
}

/// Per-work predicted or gold element sets for all three units.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Elements {
    pub concepts: BTreeSet<String>,
    pub triplets: BTreeSet<(String, String)>,
    pub paths: BTreeSet<String>,
}

impl Elements {
    pub fn from_hierarchy(g: &Hierarchy, paths: &[Vec<String>]) -> Self {
        Elements {
            concepts: g.nodes.clone(),
            triplets: g.edges.clone(),
            paths: paths.iter().map(|p| path_key(p)).collect(),
        }
    }

    fn score(&self, gold: &Elements, unit: Unit, work: &str) -> Result<Score, EvalError> {
        let r = match unit {
            Unit::Concept => score(&self.concepts, &gold.concepts),
            Unit::Triplet => score(&self.triplets, &gold.triplets),
            Unit::Path => score(&self.paths, &gold.paths),
        };
        r.map_err(|e| match e {
            EvalError::EmptyGold { .. } => EvalError::EmptyGold {
                work: work.to_string(),
                unit: unit.as_str(),
            },
            other => other,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Gold {
    pub works: BTreeMap<String, Elements>,
    /// Full gold paths per work, kept for seeding refinement-only runs.
    pub path_nodes: BTreeMap<String, Vec<Vec<String>>>,
}

#[derive(Deserialize)]
struct GoldConceptRow {
    work_id: String,
    concept_ids: Vec<String>,
}

#[derive(Deserialize)]
struct GoldPathRow {
    work_id: String,
    nodes: Vec<String>,
}

fn read_rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>, EvalError> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| EvalError::Malformed {
                file: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

impl Gold {
    /// Reads `gold_concepts.jsonl` and `gold_paths.jsonl`. Gold concepts may be
    /// given as ids or names; names go through the same matcher as the
    /// pipeline. Gold triplets are the hops of the gold paths.
    pub fn load(dir: &Path, store: &Store) -> Result<Gold, EvalError> {
        let mut gold = Gold::default();
        let matcher = Matcher::new(store, &[], &[]);
        let canon = |s: &String| {
            if store.contains_concept(s) {
                return s.clone();
            }
            match matcher.resolve(s) {
                Resolution::Known { id, .. } => id,
                _ => s.clone(),
            }
        };
        for row in read_rows::<GoldConceptRow>(&dir.join(GOLD_CONCEPTS_FILE))? {
            let e = gold.works.entry(row.work_id).or_default();
            e.concepts.extend(row.concept_ids.iter().map(canon));
        }
        for row in read_rows::<GoldPathRow>(&dir.join(GOLD_PATHS_FILE))? {
            let nodes: Vec<String> = row.nodes.iter().map(canon).collect();
            let e = gold.works.entry(row.work_id.clone()).or_default();
            for w in nodes.windows(2) {
                e.triplets.insert((w[0].clone(), w[1].clone()));
            }
            e.paths.insert(path_key(&nodes));
            gold.path_nodes.entry(row.work_id).or_default().push(nodes);
        }
        for (work, e) in &gold.works {
            for unit in Unit::ALL {
                let empty = match unit {
                    Unit::Concept => e.concepts.is_empty(),
                    Unit::Triplet => false,
                    Unit::Path => e.paths.is_empty(),
                };
                if empty {
                    return Err(EvalError::EmptyGold {
                        work: work.clone(),
                        unit: unit.as_str(),
                    });
                }
            }
        }
        Ok(gold)
    }

    pub fn seed(&self, work: &str) -> Hierarchy {
        match self.works.get(work) {
            Some(e) => Hierarchy {
                nodes: e.concepts.clone(),
                edges: e.triplets.clone(),
            },
            None => Hierarchy::default(),
        }
    }
}

/// Scores per-work predictions for every unit. Works whose gold has no
/// triplets (only singleton paths) are left out of the triplet unit.
pub fn evaluate(
    configuration: &str,
    predictions: &BTreeMap<String, Elements>,
    gold: &Gold,
) -> Result<Vec<EvalReport>, EvalError> {
    let empty = Elements::default();
    let mut reports = Vec::new();
    for unit in Unit::ALL {
        let mut rows = Vec::new();
        for (work, g) in &gold.works {
            if unit == Unit::Triplet && g.triplets.is_empty() {
                continue;
            }
            let pred = predictions.get(work).unwrap_or(&empty);
            rows.push(WorkScore {
                work_id: work.clone(),
                score: pred.score(g, unit, work)?,
            });
        }
        reports.push(EvalReport::aggregate(configuration, unit, rows));
    }
    Ok(reports)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub configuration: Ablation,
    pub reports: Vec<EvalReport>,
    pub failed_works: Vec<String>,
    pub hallucinations: u64,
}

impl AblationReport {
    pub fn unit(&self, unit: Unit) -> &EvalReport {
        self.reports
            .iter()
            .find(|r| r.unit == unit)
            .expect("every unit reported")
    }
}

/// Runs `ctx` under `configuration` over every gold work without touching the
/// store, then scores the predictions.
pub fn run_ablation(
    configuration: Ablation,
    store: &Store,
    gold: &Gold,
    ctx: &PipelineContext<'_>,
) -> Result<AblationReport, EvalError> {
    let mut config = ctx.config.clone();
    config.ablation = configuration;
    let ctx = PipelineContext {
        backend: ctx.backend,
        expert: ctx.expert,
        kbs: ctx.kbs.clone(),
        prompts: ctx.prompts.clone(),
        config,
        clock: ctx.clock,
    };
    let works: Vec<&String> = gold.works.keys().collect();
    let runs = works
        .par_iter()
        .map(|id| {
            let work = store.work(id).ok_or_else(|| EvalError::UnknownWork((*id).clone()))?;
            let seed = gold.seed(id);
            let outcome = run_work(work, store, None, Some(&seed), &ctx)?;
            Ok(outcome.run)
        })
        .collect::<Result<Vec<_>, EvalError>>()?;

    let mut predictions = BTreeMap::new();
    let mut failed = Vec::new();
    let mut hallucinations = 0;
    for run in runs {
        hallucinations += run.counters.hallucinations as u64;
        match run.status {
            RunStatus::AwaitingReview => {
                return Err(EvalError::MissingDecisions {
                    configuration: configuration.to_string(),
                    work: run.work_id,
                    items: run.parked_on,
                })
            }
            RunStatus::Completed => {
                predictions.insert(
                    run.work_id.clone(),
                    Elements::from_hierarchy(&run.hierarchy, &run.paths),
                );
            }
            RunStatus::Failed | RunStatus::AwaitingRetry => {
                log::warn!(
                    "{configuration}: work {} did not complete: {:?}",
                    run.work_id,
                    run.error
                );
                failed.push(run.work_id);
            }
        }
    }
    Ok(AblationReport {
        configuration,
        reports: evaluate(configuration.as_str(), &predictions, gold)?,
        failed_works: failed,
        hallucinations,
    })
}

/// Writes `eval_report.json` and a one-row-per-unit `eval_report.csv`.
pub fn write_reports(dir: &Path, reports: &[AblationReport]) -> Result<(), EvalError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(REPORT_FILE), serde_json::to_string_pretty(reports)?)?;
    let mut w = csv::Writer::from_path(dir.join(REPORT_CSV))?;
    w.write_record([
        "configuration",
        "unit",
        "precision",
        "recall",
        "f1",
        "macro_precision",
        "macro_recall",
        "macro_f1",
        "pred",
        "gold",
        "hit",
    ])?;
    for a in reports {
        for r in &a.reports {
            w.write_record([
                r.configuration.clone(),
                r.unit.as_str().to_string(),
                format!("{:.4}", r.precision),
                format!("{:.4}", r.recall),
                format!("{:.4}", r.f1),
                format!("{:.4}", r.macro_precision),
                format!("{:.4}", r.macro_recall),
                format!("{:.4}", r.macro_f1),
                r.counts.pred.to_string(),
                r.counts.gold.to_string(),
                r.counts.hit.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
