//! Four-stage constrained extraction over a pluggable language-model backend:
//! segmentation, concept pairs with KB validation, vocabulary-constrained
//! `is-a` triplets, and iterative refinement of the per-work hierarchy.
//!
//! A work run is replayable. Every parsed backend response is kept in the
//! run's transcript and every review item has a content-derived id, so
//! re-running a parked work after expert decisions replays the earlier calls
//! and journals nothing twice.

mod backend;
mod engine;
mod expert;
mod grammar;
mod matcher;
mod prompts;

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

pub use backend::{
    Backend, BackendError, BackendRequest, BackendResponse, ChatCompletionsBackend, Decoding, ScriptEntry,
    ScriptedMock, Usage,
};
pub use engine::{
    commit_run, review_item_id, run_pipeline, run_work, Ablation, Decision, PipelineConfig, PipelineContext,
    PipelineError, PipelineSummary, WorkOutcome, Writes, MAX_ITERATIONS,
};
pub use expert::{ConceptEdit, ExpertDecision, ExpertSource, NoExpert, ScriptedExpert};
pub use grammar::{
    parse_concept_pairs, parse_refinement, parse_relations, parse_segments, ParseFault, Proposal, StageParseError,
};
pub use matcher::{KbClient, KbEntry, KbError, Matcher, NearMatch, OpenAlexKb, Resolution, StaticKb, FUZZY_THRESHOLD};
pub use prompts::{Prompt, PromptSet, PROMPT_VERSION};

/// Stage tag carried by every backend request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Segmentation,
    Pairs,
    Relations,
    Refinement,
    /// Single-call baselines that skip the staged decomposition.
    Direct,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Segmentation => "segmentation",
            Stage::Pairs => "pairs",
            Stage::Relations => "relations",
            Stage::Refinement => "refinement",
            Stage::Direct => "direct",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Segment {
    RelatedResearch,
    ResearchMethods,
    Conclusions,
}

impl Segment {
    pub const ALL: [Segment; 3] = [Segment::RelatedResearch, Segment::ResearchMethods, Segment::Conclusions];

    pub fn tag(&self) -> &'static str {
        match self {
            Segment::RelatedResearch => "related_research",
            Segment::ResearchMethods => "research_methods",
            Segment::Conclusions => "conclusions",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedAbstract {
    pub work_id: String,
    pub related_research: String,
    pub research_methods: String,
    pub conclusions: String,
}

impl SegmentedAbstract {
    pub fn get(&self, segment: Segment) -> &str {
        match segment {
            Segment::RelatedResearch => &self.related_research,
            Segment::ResearchMethods => &self.research_methods,
            Segment::Conclusions => &self.conclusions,
        }
    }

    /// The three segments re-wrapped in their tags, in fixed order.
    pub fn tagged(&self) -> String {
        Segment::ALL
            .iter()
            .map(|s| format!("<{0}>{1}</{0}>", s.tag(), self.get(*s)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairState {
    Pending,
    KbMatched,
    ExpertApproved,
    Rejected,
}

impl PairState {
    pub fn is_validated(&self) -> bool {
        matches!(self, PairState::KbMatched | PairState::ExpertApproved)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptPair {
    pub domain: String,
    pub specific_concept: String,
    pub segment_origin: Segment,
    pub validation_state: PairState,
    #[serde(default)]
    pub matched_concept_ids: Option<(String, String)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripletState {
    Candidate,
    Accepted,
    Rejected,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triplet {
    pub parent_id: String,
    pub child_id: String,
    pub relation: crate::kgstore::Relation,
    /// Segments the pairs of this batch came from.
    pub evidence_segment: Vec<Segment>,
    pub state: TripletState,
    /// A store path from parent to child, when one exists.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RefineAction {
    Add,
    Delete,
    Keep,
}

impl RefineAction {
    pub fn as_str(&self) -> &'static str {
        match self {
            RefineAction::Add => "add",
            RefineAction::Delete => "delete",
            RefineAction::Keep => "keep",
        }
    }
}

/// What a refinement decision ended up doing to the working hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineEffect {
    AddedIntermediate,
    DeletedRelation,
    DeletedConcept,
    Unchanged,
    RejectedLevelOrder,
    RejectedByExpert,
    OutOfVocabulary,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinementAction {
    pub pair: (String, String),
    #[serde(default)]
    pub proposed_intermediate: Option<String>,
    pub action: RefineAction,
    pub iteration: u32,
    pub effect: RefineEffect,
    pub review_item: String,
}

/// The per-work hierarchy G: nodes plus `is-a` edges.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hierarchy {
    pub nodes: BTreeSet<String>,
    pub edges: BTreeSet<(String, String)>,
}

impl Hierarchy {
    pub fn remove_concept(&mut self, id: &str) -> bool {
        let had = self.nodes.remove(id);
        let before = self.edges.len();
        self.edges.retain(|(p, c)| p != id && c != id);
        had || self.edges.len() != before
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Completed,
    AwaitingReview,
    AwaitingRetry,
    Failed,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub calls: u32,
    pub cached: u32,
    pub retries: u32,
    pub parse_failures: u32,
    pub elapsed_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counters {
    /// Triplets discarded for naming a concept outside the validated set.
    pub hallucinations: u32,
    pub level_order_rejections: u32,
    pub review_routed: u32,
    pub kb_timeouts: u32,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

/// One accepted backend exchange, replayed when the same request recurs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub stage: Stage,
    pub digest: String,
    pub response: String,
}

/// Persisted state of one work's pipeline run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkRun {
    pub work_id: String,
    pub status: RunStatus,
    #[serde(default)]
    pub error: Option<String>,
    #[serde(default)]
    pub segments: Option<SegmentedAbstract>,
    #[serde(default)]
    pub pairs: Vec<ConceptPair>,
    #[serde(default)]
    pub triplets: Vec<Triplet>,
    #[serde(default)]
    pub refinements: Vec<RefinementAction>,
    #[serde(default)]
    pub iterations: u32,
    #[serde(default)]
    pub hierarchy: Hierarchy,
    #[serde(default)]
    pub paths: Vec<Vec<String>>,
    /// Review items this run is blocked on.
    #[serde(default)]
    pub parked_on: Vec<String>,
    #[serde(default)]
    pub next_retry_at: Option<DateTime<Utc>>,
    #[serde(default)]
    pub counters: Counters,
    #[serde(default)]
    pub stages: BTreeMap<Stage, StageReport>,
    #[serde(default)]
    pub transcript: Vec<TranscriptEntry>,
    /// Backend calls made for this work across resumed runs.
    #[serde(default)]
    pub backend_calls: u32,
}

impl WorkRun {
    pub fn new(work_id: &str) -> Self {
        WorkRun {
            work_id: work_id.to_string(),
            status: RunStatus::Failed,
            error: None,
            segments: None,
            pairs: Vec::new(),
            triplets: Vec::new(),
            refinements: Vec::new(),
            iterations: 0,
            hierarchy: Hierarchy::default(),
            paths: Vec::new(),
            parked_on: Vec::new(),
            next_retry_at: None,
            counters: Counters::default(),
            stages: BTreeMap::new(),
            transcript: Vec::new(),
            backend_calls: 0,
        }
    }

    /// Concept ids of validated Stage-2 pairs.
    pub fn validated_concepts(&self) -> BTreeSet<String> {
        self.pairs
            .iter()
            .filter(|p| p.validation_state.is_validated())
            .filter_map(|p| p.matched_concept_ids.as_ref())
            .flat_map(|(a, b)| [a.clone(), b.clone()])
            .collect()
    }

    pub fn accepted_triplets(&self) -> impl Iterator<Item = &Triplet> {
        self.triplets.iter().filter(|t| t.state == TripletState::Accepted)
    }

    pub fn path_keys(&self) -> BTreeSet<String> {
        self.paths.iter().map(|p| crate::paths::path_key(p)).collect()
    }
}
