use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::sync::Arc;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::backend::{Backend, BackendError, BackendRequest, Decoding};
use super::expert::{ExpertDecision, ExpertSource};
use super::grammar::{parse_concept_pairs, parse_refinement, parse_relations, parse_segments, StageParseError};
use super::matcher::{KbClient, Matcher, Resolution};
use super::prompts::{Prompt, PromptSet};
use super::{
    ConceptPair, Hierarchy, PairState, RefineAction, RefineEffect, RefinementAction, RunStatus, Segment,
    SegmentedAbstract, Stage, TranscriptEntry, Triplet, TripletState, WorkRun,
};
use crate::kgstore::{
    Actor, Concept, ConceptEdge, ConceptTable, JournalAction, Relation, ReviewItem, ReviewKind, SharedStore, Source,
    Store, StoreError, SubgraphView, TransitionError, Work,
};
use crate::paths::{maximal_paths, ConceptPath, PathOptions};
use crate::text::normalize_name;

/// Hard cap on Stage-4 iterations.
pub const MAX_ITERATIONS: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    DirectGenerate,
    Stages23Raw,
    Stages23Expert,
    Stages23ExpertKg,
    Stage4Only,
    EndToEnd,
    ZeroShotBaseline,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::DirectGenerate,
        Ablation::Stages23Raw,
        Ablation::Stages23Expert,
        Ablation::Stages23ExpertKg,
        Ablation::Stage4Only,
        Ablation::EndToEnd,
        Ablation::ZeroShotBaseline,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Ablation::DirectGenerate => "direct_generate",
            Ablation::Stages23Raw => "stages23_raw",
            Ablation::Stages23Expert => "stages23_expert",
            Ablation::Stages23ExpertKg => "stages23_expert_kg",
            Ablation::Stage4Only => "stage4_only",
            Ablation::EndToEnd => "end_to_end",
            Ablation::ZeroShotBaseline => "zero_shot_baseline",
        }
    }

    /// KB matching in Stage 2 and the vocabulary constraint in Stage 3.
    pub fn kg(&self) -> bool {
        matches!(
            self,
            Ablation::Stages23ExpertKg | Ablation::Stage4Only | Ablation::EndToEnd
        )
    }

    pub fn expert(&self) -> bool {
        matches!(
            self,
            Ablation::Stages23Expert | Ablation::Stages23ExpertKg | Ablation::Stage4Only | Ablation::EndToEnd
        )
    }

    pub fn refine(&self) -> bool {
        matches!(self, Ablation::Stage4Only | Ablation::EndToEnd)
    }
}

impl std::fmt::Display for Ablation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| format!("unknown configuration `{s}`"))
    }
}

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub ablation: Ablation,
    /// Extra attempts after a stage output fails to parse.
    pub max_retries: u32,
    pub batch_size: usize,
    pub max_iterations: u32,
    pub path_options: PathOptions,
    /// Attach store paths connecting each accepted triplet as support.
    pub augment_from_store: bool,
    pub decoding: BTreeMap<Stage, Decoding>,
    pub kb_retry_base: Duration,
    pub kb_retry_cap: Duration,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            ablation: Ablation::EndToEnd,
            max_retries: 2,
            batch_size: 8,
            max_iterations: MAX_ITERATIONS,
            path_options: PathOptions::default(),
            augment_from_store: false,
            decoding: BTreeMap::new(),
            kb_retry_base: Duration::from_secs(30),
            kb_retry_cap: Duration::from_secs(3600),
        }
    }
}

pub struct PipelineContext<'a> {
    pub backend: &'a dyn Backend,
    pub expert: &'a dyn ExpertSource,
    pub kbs: Vec<Arc<dyn KbClient>>,
    pub prompts: PromptSet,
    pub config: PipelineConfig,
    pub clock: fn() -> DateTime<Utc>,
}

impl<'a> PipelineContext<'a> {
    pub fn new(backend: &'a dyn Backend, expert: &'a dyn ExpertSource) -> Self {
        PipelineContext {
            backend,
            expert,
            kbs: Vec::new(),
            prompts: PromptSet::default(),
            config: PipelineConfig::default(),
            clock: Utc::now,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("work `{work}` cannot enter the pipeline: {reason}")]
    Precondition { work: String, reason: String },
    #[error("unknown work `{0}`")]
    UnknownWork(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decision {
    pub item_id: String,
    pub actor: Actor,
    pub action: JournalAction,
    pub payload: Value,
}

/// Store mutations produced by one work run, applied by [`commit_run`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Writes {
    pub concepts: Vec<Concept>,
    pub items: Vec<ReviewItem>,
    pub decisions: Vec<Decision>,
    pub edges: Vec<ConceptEdge>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkOutcome {
    pub run: WorkRun,
    pub writes: Writes,
}

enum StageFailure {
    Parse(StageParseError),
    Backend(BackendError),
}

impl std::fmt::Display for StageFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StageFailure::Parse(e) => write!(f, "{e}"),
            StageFailure::Backend(e) => write!(f, "{e}"),
        }
    }
}

enum Review {
    Decided(ExpertDecision),
    Parked,
}

#[derive(Clone)]
enum NameOutcome {
    Resolved { id: String, state: PairState },
    Waiting { timeout: bool },
    Rejected,
}

/// Run halted early; the run record says why.
struct Halt;

fn hex_digest(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p.as_bytes());
        h.update([0x1f]);
    }
    format!("{:x}", h.finalize())
}

pub fn review_item_id(work_id: &str, kind: ReviewKind, key: &str) -> String {
    format!(
        "{work_id}-{}-{}",
        kind.as_str(),
        &hex_digest(&[work_id, kind.as_str(), key])[..10]
    )
}

fn synthetic_id(name: &str) -> String {
    format!("llm:{}", normalize_name(name).replace('>', " "))
}

fn expert_concept_id(name: &str) -> String {
    format!("E{}", &hex_digest(&[&normalize_name(name)])[..12])
}

struct Exec<'a, 'c> {
    work: &'a Work,
    store: &'a Store,
    ctx: &'a PipelineContext<'c>,
    run: WorkRun,
    writes: Writes,
    cache: HashMap<String, String>,
    seen_requests: HashMap<String, u32>,
    names: HashMap<String, NameOutcome>,
    expert_nodes: BTreeSet<String>,
}

impl<'a, 'c> Exec<'a, 'c> {
    fn now(&self) -> DateTime<Utc> {
        (self.ctx.clock)()
    }

    fn concept(&self, id: &str) -> Option<&Concept> {
        self.store
            .concept(id)
            .or_else(|| self.writes.concepts.iter().find(|c| c.id == id))
    }

    fn level(&self, id: &str) -> Option<u32> {
        self.concept(id).map(|c| c.level)
    }

    fn name_of(&self, id: &str) -> String {
        match self.concept(id) {
            Some(c) => c.name.clone(),
            None => id.strip_prefix("llm:").unwrap_or(id).to_string(),
        }
    }

    fn add_concept(&mut self, c: Concept) -> String {
        let id = c.id.clone();
        if self.concept(&id).is_none() {
            self.writes.concepts.push(c);
        }
        id
    }

    fn halt(&mut self, status: RunStatus, error: Option<String>) -> Halt {
        self.run.status = status;
        self.run.error = error;
        Halt
    }

    /// One backend exchange with strict parsing and bounded retries. A
    /// response seen in an earlier run of this work is replayed instead.
    fn call<T>(
        &mut self,
        stage: Stage,
        prompt: &Prompt,
        input: String,
        parse: impl Fn(&str) -> Result<T, StageParseError>,
    ) -> Result<T, StageFailure> {
        let started = Instant::now();
        let base = hex_digest(&[stage.as_str(), prompt.name, &prompt.version, &input]);
        let nth = self.seen_requests.entry(base.clone()).or_insert(0);
        *nth += 1;
        let digest = hex_digest(&[&base, &nth.to_string()]);
        let report_key = stage;

        if let Some(text) = self.cache.get(&digest) {
            if let Ok(v) = parse(text) {
                self.run.transcript.push(TranscriptEntry {
                    stage,
                    digest,
                    response: text.clone(),
                });
                self.run.stages.entry(report_key).or_default().cached += 1;
                return Ok(v);
            }
        }

        let request = BackendRequest {
            stage,
            work_id: self.work.id.clone(),
            instruction: prompt.text.clone(),
            input,
            decoding: self.ctx.config.decoding.get(&stage).copied().unwrap_or_default(),
        };
        let mut last = None;
        for attempt in 0..=self.ctx.config.max_retries {
            if attempt > 0 {
                self.run.stages.entry(report_key).or_default().retries += 1;
            }
            self.run.stages.entry(report_key).or_default().calls += 1;
            self.run.backend_calls += 1;
            match self.ctx.backend.complete(&request) {
                Ok(resp) => {
                    self.run.counters.prompt_tokens += resp.usage.prompt_tokens;
                    self.run.counters.completion_tokens += resp.usage.completion_tokens;
                    match parse(&resp.text) {
                        Ok(v) => {
                            self.run.transcript.push(TranscriptEntry {
                                stage,
                                digest,
                                response: resp.text,
                            });
                            self.run.stages.entry(report_key).or_default().elapsed_ms +=
                                started.elapsed().as_millis() as u64;
                            return Ok(v);
                        }
                        Err(e) => {
                            log::debug!("work {}: {e}", self.work.id);
                            self.run.stages.entry(report_key).or_default().parse_failures += 1;
                            last = Some(StageFailure::Parse(e));
                        }
                    }
                }
                Err(e) => {
                    log::warn!("work {}: backend failed at {stage}: {e}", self.work.id);
                    last = Some(StageFailure::Backend(e));
                }
            }
        }
        self.run.stages.entry(report_key).or_default().elapsed_ms += started.elapsed().as_millis() as u64;
        Err(last.expect("at least one attempt"))
    }

    fn journaled_decision(&self, item_id: &str) -> Option<ExpertDecision> {
        if let Some(d) = self.writes.decisions.iter().find(|d| d.item_id == item_id) {
            return Some(decision_from(d.action, &d.payload));
        }
        let item = self.store.review_item(item_id)?;
        if item.is_pending() {
            return None;
        }
        self.store
            .decision_for(item_id)
            .map(|e| decision_from(e.action, &e.payload))
    }

    fn ensure_item(&mut self, kind: ReviewKind, key: &str, payload: Value) -> ReviewItem {
        let id = review_item_id(&self.work.id, kind, key);
        if let Some(item) = self.store.review_item(&id) {
            return item.clone();
        }
        if let Some(item) = self.writes.items.iter().find(|i| i.id == id) {
            return item.clone();
        }
        let item = ReviewItem::pending(id, kind, &self.work.id, payload, self.now());
        self.writes.items.push(item.clone());
        item
    }

    /// Routes an item to the expert: an existing decision wins, otherwise the
    /// expert source is asked, otherwise the work parks on the item.
    fn review(&mut self, kind: ReviewKind, key: &str, payload: Value) -> Review {
        let item = self.ensure_item(kind, key, payload);
        self.run.counters.review_routed += 1;
        if let Some(d) = self.journaled_decision(&item.id) {
            return Review::Decided(d);
        }
        match self.ctx.expert.decide(&item) {
            Some(d) if kind.allows(d.action) => {
                self.writes.decisions.push(Decision {
                    item_id: item.id.clone(),
                    actor: Actor::Expert,
                    action: d.action,
                    payload: json!({"note": d.note, "concept_edit": d.concept_edit}),
                });
                Review::Decided(d)
            }
            Some(d) => {
                log::warn!("ignoring illegal {} decision for {}", d.action.as_str(), item.id);
                self.run.parked_on.push(item.id.clone());
                Review::Parked
            }
            None => {
                self.run.parked_on.push(item.id.clone());
                Review::Parked
            }
        }
    }

    /// Journals an action the pipeline took on its own.
    fn system_decide(&mut self, key: &str, action: JournalAction, payload: Value) -> String {
        let item = self.ensure_item(ReviewKind::Refinement, key, payload.clone());
        if item.is_pending() && !self.writes.decisions.iter().any(|d| d.item_id == item.id) {
            self.writes.decisions.push(Decision {
                item_id: item.id.clone(),
                actor: Actor::System,
                action,
                payload,
            });
        }
        item.id
    }

    fn concept_from_decision(&mut self, d: &ExpertDecision, fallback: Option<String>) -> Option<String> {
        match &d.concept_edit {
            Some(edit) => match &edit.id {
                Some(id) if self.concept(id).is_some() => Some(id.clone()),
                _ => Some(self.add_concept(Concept::new(
                    expert_concept_id(&edit.name),
                    edit.name.clone(),
                    edit.level,
                    Source::Expert,
                ))),
            },
            None => fallback,
        }
    }

    // ---- stage 1 ----------------------------------------------------------

    fn stage1(&mut self) -> Result<SegmentedAbstract, Halt> {
        let prompt = self.ctx.prompts.segmentation.clone();
        let work_id = self.work.id.clone();
        match self.call(Stage::Segmentation, &prompt, self.work.abstract_text.clone(), |raw| {
            parse_segments(raw, &work_id)
        }) {
            Ok(seg) => Ok(seg),
            Err(failure) => {
                let raw = match &failure {
                    StageFailure::Parse(e) => e.raw.clone(),
                    StageFailure::Backend(_) => String::new(),
                };
                let payload = json!({
                    "abstract": self.work.abstract_text,
                    "error": failure.to_string(),
                    "raw": raw,
                });
                match self.review(ReviewKind::Segmentation, "segmentation", payload) {
                    Review::Decided(d) if d.action == JournalAction::Annotate => {
                        let note = d.note.unwrap_or_default();
                        parse_segments(&note, &self.work.id).map_err(|e| {
                            self.halt(RunStatus::Failed, Some(format!("expert segmentation unusable: {e}")))
                        })
                    }
                    Review::Decided(_) => Err(self.halt(
                        RunStatus::Failed,
                        Some(format!("segmentation rejected after: {failure}")),
                    )),
                    Review::Parked => Err(self.halt(RunStatus::AwaitingReview, None)),
                }
            }
        }
    }

    // ---- stage 2 ----------------------------------------------------------

    fn resolve_name(&mut self, name: &str, seg: &SegmentedAbstract, origin: Segment) -> NameOutcome {
        let key = normalize_name(name);
        if let Some(o) = self.names.get(&key) {
            return o.clone();
        }
        let ablation = self.ctx.config.ablation;
        let kbs = if ablation.kg() {
            self.ctx.kbs.clone()
        } else {
            Vec::new()
        };
        let resolution = {
            let matcher = Matcher::new(self.store, &self.writes.concepts, &kbs);
            if ablation.kg() {
                matcher.resolve(name)
            } else {
                match matcher.exact(name) {
                    Some(c) => Resolution::Known {
                        id: c.id.clone(),
                        similarity: 1.0,
                    },
                    None => Resolution::Unmatched { near: Vec::new() },
                }
            }
        };
        let outcome = match resolution {
            Resolution::Known { id, .. } => NameOutcome::Resolved {
                id,
                state: PairState::KbMatched,
            },
            Resolution::New { concept, .. } => NameOutcome::Resolved {
                id: self.add_concept(concept),
                state: PairState::KbMatched,
            },
            Resolution::Timeout { .. } => {
                self.run.counters.kb_timeouts += 1;
                NameOutcome::Waiting { timeout: true }
            }
            Resolution::Unmatched { near } => {
                if !ablation.expert() {
                    if ablation.kg() {
                        NameOutcome::Rejected
                    } else {
                        NameOutcome::Resolved {
                            id: synthetic_id(name),
                            state: PairState::Pending,
                        }
                    }
                } else {
                    let payload = json!({
                        "concept": name,
                        "segment": origin,
                        "excerpt": seg.get(origin),
                        "near_matches": near,
                    });
                    let best = near.first().map(|m| m.id.clone());
                    match self.review(ReviewKind::Pair, &key, payload) {
                        Review::Decided(d) => match d.action {
                            JournalAction::Approve | JournalAction::Annotate => {
                                match self.concept_from_decision(&d, best) {
                                    Some(id) => NameOutcome::Resolved {
                                        id,
                                        state: PairState::ExpertApproved,
                                    },
                                    None => NameOutcome::Rejected,
                                }
                            }
                            _ => NameOutcome::Rejected,
                        },
                        Review::Parked => NameOutcome::Waiting { timeout: false },
                    }
                }
            }
        };
        if !matches!(outcome, NameOutcome::Waiting { timeout: true }) {
            self.names.insert(key, outcome.clone());
        }
        outcome
    }

    fn stage2(&mut self, seg: &SegmentedAbstract) -> Result<(), Halt> {
        let prompt = self.ctx.prompts.pairs.clone();
        let mut waiting_review = false;
        let mut waiting_kb = false;
        let mut seen = BTreeSet::new();
        for origin in Segment::ALL {
            let input = format!("Segment: {}\n{}", origin.tag(), seg.get(origin));
            let raw_pairs = self
                .call(Stage::Pairs, &prompt, input, parse_concept_pairs)
                .map_err(|f| Halt::failed(self, f))?;
            for (domain, specific) in raw_pairs {
                if !seen.insert((normalize_name(&domain), normalize_name(&specific))) {
                    continue;
                }
                let a = self.resolve_name(&domain, seg, origin);
                let b = self.resolve_name(&specific, seg, origin);
                let (state, ids) = match (&a, &b) {
                    (NameOutcome::Rejected, _) | (_, NameOutcome::Rejected) => (PairState::Rejected, None),
                    (NameOutcome::Waiting { timeout }, _) | (_, NameOutcome::Waiting { timeout }) => {
                        if *timeout {
                            waiting_kb = true;
                        } else {
                            waiting_review = true;
                        }
                        (PairState::Pending, None)
                    }
                    (NameOutcome::Resolved { id: ia, state: sa }, NameOutcome::Resolved { id: ib, state: sb }) => {
                        let state = if *sa == PairState::Pending || *sb == PairState::Pending {
                            PairState::Pending
                        } else if *sa == PairState::ExpertApproved || *sb == PairState::ExpertApproved {
                            PairState::ExpertApproved
                        } else {
                            PairState::KbMatched
                        };
                        (state, Some((ia.clone(), ib.clone())))
                    }
                };
                self.run.pairs.push(ConceptPair {
                    domain,
                    specific_concept: specific,
                    segment_origin: origin,
                    validation_state: state,
                    matched_concept_ids: ids,
                });
            }
        }
        if waiting_review {
            return Err(self.halt(RunStatus::AwaitingReview, None));
        }
        if waiting_kb {
            let attempts = self.run.counters.kb_timeouts.min(16);
            let base = self.ctx.config.kb_retry_base.as_secs_f64() * 2f64.powi(attempts as i32 - 1);
            let delay = base.min(self.ctx.config.kb_retry_cap.as_secs_f64());
            self.run.next_retry_at = Some(self.now() + chrono::Duration::milliseconds((delay * 1000.0) as i64));
            return Err(self.halt(RunStatus::AwaitingRetry, Some("knowledge base timed out".into())));
        }
        Ok(())
    }

    /// Pairs allowed into Stage 3: validated ones, or any unrejected pair when
    /// the KB constraint is off.
    fn usable_pairs(&self) -> Vec<(String, String, Segment)> {
        let kg = self.ctx.config.ablation.kg();
        let mut out: Vec<(String, String, Segment)> = Vec::new();
        for p in &self.run.pairs {
            let ok = if kg {
                p.validation_state.is_validated()
            } else {
                p.validation_state != PairState::Rejected
            };
            if let (true, Some((a, b))) = (ok, &p.matched_concept_ids) {
                if !out.iter().any(|(x, y, _)| x == a && y == b) {
                    out.push((a.clone(), b.clone(), p.segment_origin));
                }
            }
        }
        out
    }

    /// Normalized surface and canonical names of the vocabulary, mapped to ids.
    fn vocabulary_names(&self, ids: &BTreeSet<String>) -> HashMap<String, String> {
        let mut map = HashMap::new();
        for id in ids {
            map.entry(normalize_name(id)).or_insert_with(|| id.clone());
            map.entry(normalize_name(&self.name_of(id)))
                .or_insert_with(|| id.clone());
        }
        for p in &self.run.pairs {
            if let Some((a, b)) = &p.matched_concept_ids {
                if ids.contains(a) {
                    map.entry(normalize_name(&p.domain)).or_insert_with(|| a.clone());
                }
                if ids.contains(b) {
                    map.entry(normalize_name(&p.specific_concept))
                        .or_insert_with(|| b.clone());
                }
            }
        }
        map
    }

    // ---- stage 3 ----------------------------------------------------------

    fn stage3(&mut self, seg: &SegmentedAbstract) -> Result<(), Halt> {
        let pairs = self.usable_pairs();
        let vocab: BTreeSet<String> = pairs.iter().flat_map(|(a, b, _)| [a.clone(), b.clone()]).collect();
        let names = self.vocabulary_names(&vocab);
        let kg = self.ctx.config.ablation.kg();
        let prompt = self.ctx.prompts.relations.clone();
        let batch = self.ctx.config.batch_size.max(1);
        for chunk in pairs.chunks(batch) {
            let listed: Vec<[String; 2]> = chunk
                .iter()
                .map(|(a, b, _)| [self.name_of(a), self.name_of(b)])
                .collect();
            let input = format!(
                "{}\nPairs: {}",
                seg.tagged(),
                serde_json::to_string(&listed).expect("strings serialize")
            );
            let mut evidence: Vec<Segment> = chunk.iter().map(|(_, _, s)| *s).collect();
            evidence.sort();
            evidence.dedup();
            let proposed = self
                .call(Stage::Relations, &prompt, input, |raw| {
                    parse_relations(raw, Stage::Relations)
                })
                .map_err(|f| Halt::failed(self, f))?;
            for (p, c) in proposed {
                let lookup = |n: &str| names.get(&normalize_name(n)).cloned();
                let (pid, cid) = match (lookup(&p), lookup(&c)) {
                    (Some(pid), Some(cid)) => (pid, cid),
                    (pid, cid) if kg => {
                        log::debug!("work {}: discarded out-of-vocabulary triplet {p} -> {c}", self.work.id);
                        let _ = (pid, cid);
                        self.run.counters.hallucinations += 1;
                        continue;
                    }
                    (pid, cid) => (
                        pid.unwrap_or_else(|| self.resolve_loose(&p)),
                        cid.unwrap_or_else(|| self.resolve_loose(&c)),
                    ),
                };
                if pid == cid
                    || self
                        .run
                        .triplets
                        .iter()
                        .any(|t| t.parent_id == pid && t.child_id == cid)
                {
                    continue;
                }
                let state = match (self.level(&pid), self.level(&cid)) {
                    (Some(lp), Some(lc)) if lp >= lc => {
                        self.run.counters.level_order_rejections += 1;
                        TripletState::Rejected
                    }
                    _ => TripletState::Accepted,
                };
                let support = if self.ctx.config.augment_from_store && state == TripletState::Accepted {
                    store_path(self.store, &pid, &cid)
                } else {
                    None
                };
                self.run.triplets.push(Triplet {
                    parent_id: pid,
                    child_id: cid,
                    relation: Relation::IsA,
                    evidence_segment: evidence.clone(),
                    state,
                    support,
                });
            }
        }
        Ok(())
    }

    fn resolve_loose(&self, name: &str) -> String {
        Matcher::new(self.store, &self.writes.concepts, &[])
            .exact(name)
            .map(|c| c.id.clone())
            .unwrap_or_else(|| synthetic_id(name))
    }

    // ---- stage 4 ----------------------------------------------------------

    fn stage4(&mut self, mut g: Hierarchy, mut vocab: BTreeSet<String>) -> Result<Hierarchy, Halt> {
        let prompt = self.ctx.prompts.refinement.clone();
        let max = self.ctx.config.max_iterations.clamp(1, MAX_ITERATIONS);
        let mut iteration = 0;
        let mut delta = true;
        while delta && iteration < max {
            delta = false;
            iteration += 1;
            self.run.iterations = iteration;
            let pairs: Vec<(String, String)> = g.edges.iter().cloned().collect();
            for (a, b) in pairs {
                if !g.edges.contains(&(a.clone(), b.clone())) {
                    continue;
                }
                let input = format!(
                    "Abstract: {}\nParent: {}\nChild: {}",
                    self.work.abstract_text,
                    self.name_of(&a),
                    self.name_of(&b)
                );
                let Some(proposal) = self
                    .call(Stage::Refinement, &prompt, input, parse_refinement)
                    .map_err(|f| Halt::failed(self, f))?
                else {
                    continue;
                };
                let key = format!(
                    "{iteration}|{a}|{b}|{}|{}",
                    normalize_name(&proposal.concept),
                    proposal.action.as_str()
                );
                let names = self.vocabulary_names(&vocab);
                let known = names.get(&normalize_name(&proposal.concept)).cloned();
                let base = json!({
                    "pair": [a, b],
                    "pair_names": [self.name_of(&a), self.name_of(&b)],
                    "proposed": proposal.concept,
                    "iteration": iteration,
                });
                let (effect, item) = match proposal.action {
                    RefineAction::Keep => {
                        let item =
                            self.system_decide(&key, JournalAction::Keep, with_effect(&base, RefineEffect::Unchanged));
                        (RefineEffect::Unchanged, item)
                    }
                    RefineAction::Delete => {
                        let effect = match &known {
                            Some(c) if *c == a || *c == b => {
                                g.edges.remove(&(a.clone(), b.clone()));
                                RefineEffect::DeletedRelation
                            }
                            Some(c) if g.nodes.contains(c) => {
                                g.remove_concept(c);
                                RefineEffect::DeletedConcept
                            }
                            _ => {
                                self.run.counters.hallucinations += 1;
                                RefineEffect::OutOfVocabulary
                            }
                        };
                        delta |= matches!(effect, RefineEffect::DeletedRelation | RefineEffect::DeletedConcept);
                        let item = self.system_decide(&key, JournalAction::Delete, with_effect(&base, effect));
                        (effect, item)
                    }
                    RefineAction::Add => {
                        let (candidate, via_expert, item) = match known {
                            Some(c) => (Some(c), false, None),
                            None => match self.expert_add(&key, &proposal.concept, &base) {
                                Some((c, item)) => (c, true, Some(item)),
                                None => return Err(self.halt(RunStatus::AwaitingReview, None)),
                            },
                        };
                        match candidate {
                            None => (RefineEffect::RejectedByExpert, item.expect("expert item")),
                            Some(c) => {
                                let ordered = matches!(
                                    (self.level(&a), self.level(&c), self.level(&b)),
                                    (Some(la), Some(lc), Some(lb)) if la < lc && lc < lb
                                );
                                if ordered {
                                    g.edges.remove(&(a.clone(), b.clone()));
                                    g.nodes.insert(c.clone());
                                    g.edges.insert((a.clone(), c.clone()));
                                    g.edges.insert((c.clone(), b.clone()));
                                    vocab.insert(c.clone());
                                    if via_expert {
                                        self.expert_nodes.insert(c.clone());
                                    }
                                    delta = true;
                                    let payload = with_effect(&base, RefineEffect::AddedIntermediate);
                                    let item = match item {
                                        Some(i) => i,
                                        None => self.system_decide(&key, JournalAction::Add, payload),
                                    };
                                    (RefineEffect::AddedIntermediate, item)
                                } else {
                                    self.run.counters.level_order_rejections += 1;
                                    let payload = with_effect(&base, RefineEffect::RejectedLevelOrder);
                                    let rejected =
                                        self.system_decide(&format!("{key}|level"), JournalAction::Reject, payload);
                                    (RefineEffect::RejectedLevelOrder, rejected)
                                }
                            }
                        }
                    }
                };
                self.run.refinements.push(RefinementAction {
                    pair: (a.clone(), b.clone()),
                    proposed_intermediate: Some(proposal.concept.clone()),
                    action: proposal.action,
                    iteration,
                    effect,
                    review_item: item,
                });
            }
        }
        Ok(g)
    }

    /// An intermediate outside the vocabulary goes through matching and then
    /// the expert. Returns the approved concept id (None when refused) and the
    /// review item, or None while the item is undecided.
    fn expert_add(&mut self, key: &str, name: &str, base: &Value) -> Option<(Option<String>, String)> {
        let resolution = Matcher::new(self.store, &self.writes.concepts, &self.ctx.kbs).resolve(name);
        let (matched, fresh) = match resolution {
            Resolution::Known { id, .. } => (Some(id), None),
            Resolution::New { concept, .. } => (Some(concept.id.clone()), Some(concept)),
            _ => (None, None),
        };
        let mut payload = base.clone();
        payload["match"] = json!(matched);
        let id = review_item_id(&self.work.id, ReviewKind::Refinement, key);
        match self.review(ReviewKind::Refinement, key, payload) {
            Review::Parked => None,
            Review::Decided(d) => match d.action {
                JournalAction::Approve | JournalAction::Add => {
                    if let (Some(c), None) = (fresh, &d.concept_edit) {
                        self.add_concept(c);
                    }
                    Some((self.concept_from_decision(&d, matched), id))
                }
                _ => Some((None, id)),
            },
        }
    }

    // ---- direct baselines ---------------------------------------------------

    fn direct(&mut self, prompt: Prompt) -> Result<Hierarchy, Halt> {
        let triples = self
            .call(Stage::Direct, &prompt, self.work.abstract_text.clone(), |raw| {
                parse_relations(raw, Stage::Direct)
            })
            .map_err(|f| Halt::failed(self, f))?;
        let mut g = Hierarchy::default();
        for (p, c) in triples {
            let (pid, cid) = (self.resolve_loose(&p), self.resolve_loose(&c));
            g.nodes.insert(pid.clone());
            g.nodes.insert(cid.clone());
            if pid != cid {
                if !g.edges.contains(&(pid.clone(), cid.clone())) {
                    self.run.triplets.push(Triplet {
                        parent_id: pid.clone(),
                        child_id: cid.clone(),
                        relation: Relation::IsA,
                        evidence_segment: Vec::new(),
                        state: TripletState::Accepted,
                        support: None,
                    });
                }
                g.edges.insert((pid, cid));
            }
        }
        Ok(g)
    }

    fn finish(&mut self, g: Hierarchy) {
        if self.ctx.config.ablation.kg() {
            if let Some(id) = g.nodes.iter().find(|id| self.concept(id).is_none()).cloned() {
                self.run.hierarchy = g;
                self.halt(
                    RunStatus::Failed,
                    Some(format!("hierarchy node `{id}` is not a known concept")),
                );
                return;
            }
            for (p, c) in &g.edges {
                if self.level(p) >= self.level(c) {
                    let msg = format!("hierarchy edge {p} -> {c} breaks level order");
                    self.run.hierarchy = g;
                    self.halt(RunStatus::Failed, Some(msg));
                    return;
                }
            }
            for (p, c) in &g.edges {
                let expert = self.expert_nodes.contains(p) || self.expert_nodes.contains(c);
                let mut e = ConceptEdge::new(p.clone(), c.clone(), if expert { Source::Expert } else { Source::Llm });
                e.validated = expert;
                self.writes.edges.push(e);
            }
        }
        let view = SubgraphView::from_edges(
            g.nodes.iter().cloned(),
            g.edges.iter().map(|(p, c)| (p.as_str(), c.as_str())),
        );
        match maximal_paths(&view, self.ctx.config.path_options) {
            Ok(paths) => self.run.paths = paths,
            Err(e) => self.run.error = Some(e.to_string()),
        }
        self.run.hierarchy = g;
        self.run.status = RunStatus::Completed;
    }
}

impl Halt {
    fn failed(exec: &mut Exec<'_, '_>, failure: StageFailure) -> Halt {
        exec.halt(RunStatus::Failed, Some(failure.to_string()))
    }
}

fn with_effect(base: &Value, effect: RefineEffect) -> Value {
    let mut v = base.clone();
    v["effect"] = json!(effect);
    v
}

fn decision_from(action: JournalAction, payload: &Value) -> ExpertDecision {
    ExpertDecision {
        action,
        note: payload.get("note").and_then(Value::as_str).map(str::to_string),
        concept_edit: payload
            .get("concept_edit")
            .and_then(|v| serde_json::from_value(v.clone()).ok()),
    }
}

/// Shortest chain parent -> ... -> child in the store's cleaned hierarchy.
fn store_path(store: &Store, parent: &str, child: &str) -> Option<Vec<String>> {
    let graph = store.cleaned_graph().ok()?;
    let mut prev: HashMap<String, String> = HashMap::new();
    let mut queue = VecDeque::from([parent.to_string()]);
    while let Some(n) = queue.pop_front() {
        if n == child {
            let mut path = vec![n];
            while let Some(p) = prev.get(path.last().expect("non-empty")) {
                path.push(p.clone());
            }
            path.reverse();
            return Some(path);
        }
        for k in graph.children(&n) {
            if k != parent && !prev.contains_key(k) {
                prev.insert(k.clone(), n.clone());
                queue.push_back(k.clone());
            }
        }
    }
    None
}

/// Runs every enabled stage for one work against a store snapshot. Responses
/// recorded in `previous` are replayed; decisions already journaled in the
/// store are reused.
pub fn run_work(
    work: &Work,
    store: &Store,
    previous: Option<&WorkRun>,
    seed: Option<&Hierarchy>,
    ctx: &PipelineContext<'_>,
) -> Result<WorkOutcome, PipelineError> {
    if work.abstract_text.trim().is_empty() {
        return Err(PipelineError::Precondition {
            work: work.id.clone(),
            reason: "abstract is empty".into(),
        });
    }
    let mut exec = Exec {
        work,
        store,
        ctx,
        run: WorkRun::new(&work.id),
        writes: Writes::default(),
        cache: previous
            .map(|r| {
                r.transcript
                    .iter()
                    .map(|t| (t.digest.clone(), t.response.clone()))
                    .collect()
            })
            .unwrap_or_default(),
        seen_requests: HashMap::new(),
        names: HashMap::new(),
        expert_nodes: BTreeSet::new(),
    };
    if let Some(prev) = previous {
        exec.run.counters.kb_timeouts = prev.counters.kb_timeouts;
        exec.run.backend_calls = prev.backend_calls;
    }
    let _ = drive(&mut exec, seed);
    Ok(WorkOutcome {
        run: exec.run,
        writes: exec.writes,
    })
}

fn drive(exec: &mut Exec<'_, '_>, seed: Option<&Hierarchy>) -> Result<(), Halt> {
    let ablation = exec.ctx.config.ablation;
    let g = match ablation {
        Ablation::DirectGenerate => exec.direct(exec.ctx.prompts.direct.clone())?,
        Ablation::ZeroShotBaseline => exec.direct(exec.ctx.prompts.zero_shot.clone())?,
        Ablation::Stage4Only => {
            let seed = seed.cloned().unwrap_or_default();
            exec.run.triplets = seed
                .edges
                .iter()
                .map(|(p, c)| Triplet {
                    parent_id: p.clone(),
                    child_id: c.clone(),
                    relation: Relation::IsA,
                    evidence_segment: Vec::new(),
                    state: TripletState::Accepted,
                    support: None,
                })
                .collect();
            let vocab = seed.nodes.clone();
            exec.stage4(seed, vocab)?
        }
        _ => {
            let seg = exec.stage1()?;
            exec.run.segments = Some(seg.clone());
            exec.stage2(&seg)?;
            exec.stage3(&seg)?;
            let vocab: BTreeSet<String> = exec.usable_pairs().into_iter().flat_map(|(a, b, _)| [a, b]).collect();
            let g = Hierarchy {
                nodes: vocab.clone(),
                edges: exec
                    .run
                    .accepted_triplets()
                    .map(|t| (t.parent_id.clone(), t.child_id.clone()))
                    .collect(),
            };
            if ablation.refine() {
                exec.stage4(g, vocab)?
            } else {
                g
            }
        }
    };
    exec.finish(g);
    Ok(())
}

/// Applies one outcome to the store. Decisions that lost a race against the
/// review API are skipped; the stored decision wins on the next run.
pub fn commit_run(store: &mut Store, outcome: WorkOutcome) -> Result<(), StoreError> {
    let WorkOutcome { mut run, writes } = outcome;
    for c in writes.concepts {
        if !store.contains_concept(&c.id) {
            store.insert_concept(c)?;
        }
    }
    for item in writes.items {
        store.enqueue(item);
    }
    for d in writes.decisions {
        match store.decide(&d.item_id, d.actor, d.action, d.payload, Utc::now()) {
            Ok(_) => {}
            Err(StoreError::Transition(TransitionError::AlreadyDecided { id, .. })) => {
                log::warn!("item {id} was decided concurrently; keeping the stored decision");
                run.parked_on.push(id);
                if run.status == RunStatus::Completed {
                    run.status = RunStatus::AwaitingReview;
                }
            }
            Err(e) => return Err(e),
        }
    }
    let grounded = run.hierarchy.nodes.iter().all(|n| store.contains_concept(n))
        && run
            .hierarchy
            .edges
            .iter()
            .all(|(p, c)| writes.edges.iter().any(|e| e.key() == (p.as_str(), c.as_str())));
    if run.status == RunStatus::Completed && !grounded {
        log::warn!(
            "work {}: hierarchy is not grounded in the store; paths kept on the run only",
            run.work_id
        );
    }
    if run.status == RunStatus::Completed && grounded {
        for e in writes.edges {
            store.upsert_edge(e)?;
        }
        let paths = run
            .paths
            .iter()
            .map(|nodes| ConceptPath::from_nodes(&run.work_id, nodes.clone(), &*store))
            .collect::<Result<Vec<_>, _>>()?;
        store.replace_work_paths(&run.work_id, paths);
    }
    store.upsert_run(run);
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct PipelineSummary {
    pub processed: usize,
    pub completed: usize,
    pub awaiting_review: usize,
    pub awaiting_retry: usize,
    pub failed: usize,
    pub rejected: usize,
    pub skipped: usize,
    pub hallucinations: u64,
    pub review_routed: u64,
}

impl PipelineSummary {
    fn count(&mut self, run: &WorkRun) {
        self.processed += 1;
        match run.status {
            RunStatus::Completed => self.completed += 1,
            RunStatus::AwaitingReview => self.awaiting_review += 1,
            RunStatus::AwaitingRetry => self.awaiting_retry += 1,
            RunStatus::Failed => self.failed += 1,
        }
        self.hallucinations += run.counters.hallucinations as u64;
        self.review_routed += run.counters.review_routed as u64;
    }
}

/// Runs the pipeline over `work_ids` (or every work whose last run is not
/// complete) with up to `parallel` works in flight, committing each batch of
/// outcomes as one published snapshot.
pub fn run_pipeline(
    shared: &SharedStore,
    work_ids: Option<&[String]>,
    ctx: &PipelineContext<'_>,
    parallel: usize,
    rerun: bool,
) -> Result<PipelineSummary, PipelineError> {
    let snapshot = shared.snapshot();
    let now = (ctx.clock)();
    let mut ids: Vec<String> = match work_ids {
        Some(ids) => {
            for id in ids {
                if snapshot.work(id).is_none() {
                    return Err(PipelineError::UnknownWork(id.clone()));
                }
            }
            ids.to_vec()
        }
        None => snapshot.works().iter().map(|w| w.id.clone()).collect(),
    };
    ids.sort();
    ids.dedup();

    let mut summary = PipelineSummary::default();
    let due: Vec<String> = ids
        .into_iter()
        .filter(|id| {
            let due = match snapshot.run(id) {
                None => true,
                Some(_) if rerun => true,
                Some(r) => match r.status {
                    RunStatus::Completed => false,
                    RunStatus::AwaitingRetry => r.next_retry_at.is_none_or(|t| t <= now),
                    _ => true,
                },
            };
            if !due {
                summary.skipped += 1;
            }
            due
        })
        .collect();

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallel.max(1))
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;
    for chunk in due.chunks(parallel.max(1) * 4) {
        let snapshot = shared.snapshot();
        let outcomes: Vec<Result<WorkOutcome, PipelineError>> = pool.install(|| {
            chunk
                .par_iter()
                .map(|id| {
                    let work = snapshot.work(id).expect("selected from snapshot");
                    let previous = if rerun { None } else { snapshot.run(id) };
                    run_work(work, &snapshot, previous, None, ctx)
                })
                .collect()
        });
        shared.write(|store| {
            for outcome in outcomes {
                match outcome {
                    Ok(o) => {
                        summary.count(&o.run);
                        commit_run(store, o)?;
                    }
                    Err(PipelineError::Precondition { work, reason }) => {
                        log::warn!("work {work} rejected: {reason}");
                        summary.rejected += 1;
                        let mut run = WorkRun::new(&work);
                        run.error = Some(reason);
                        store.upsert_run(run);
                    }
                    Err(e) => return Err(e),
                }
            }
            Ok::<_, PipelineError>(())
        })?;
    }
    Ok(summary)
}
