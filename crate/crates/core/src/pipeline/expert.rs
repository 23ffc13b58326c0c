use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::kgstore::{JournalAction, ReviewItem, ReviewKind};

/// A concept supplied by the expert when approving an unknown name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptEdit {
    pub name: String,
    pub level: u32,
    /// Existing store concept to map to instead of creating one.
    #[serde(default)]
    pub id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertDecision {
    pub action: JournalAction,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub concept_edit: Option<ConceptEdit>,
}

impl ExpertDecision {
    pub fn new(action: JournalAction) -> Self {
        ExpertDecision {
            action,
            note: None,
            concept_edit: None,
        }
    }
}

/// Answers review items synchronously. Returning `None` parks the work until
/// a decision arrives through the review API.
pub trait ExpertSource: Send + Sync {
    fn decide(&self, item: &ReviewItem) -> Option<ExpertDecision>;
}

pub struct NoExpert;

impl ExpertSource for NoExpert {
    fn decide(&self, _: &ReviewItem) -> Option<ExpertDecision> {
        None
    }
}

type Rule = Box<dyn Fn(&ReviewItem) -> Option<ExpertDecision> + Send + Sync>;

/// Deterministic stand-in for the expert: per-kind rules, optionally
/// overridden per item id. Records every item it was asked about.
pub struct ScriptedExpert {
    rules: BTreeMap<ReviewKind, Rule>,
    by_item: BTreeMap<String, ExpertDecision>,
    asked: Mutex<Vec<String>>,
}

impl Default for ScriptedExpert {
    fn default() -> Self {
        ScriptedExpert {
            rules: BTreeMap::new(),
            by_item: BTreeMap::new(),
            asked: Mutex::new(Vec::new()),
        }
    }
}

impl ScriptedExpert {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn on(
        mut self,
        kind: ReviewKind,
        rule: impl Fn(&ReviewItem) -> Option<ExpertDecision> + Send + Sync + 'static,
    ) -> Self {
        self.rules.insert(kind, Box::new(rule));
        self
    }

    /// Answers every item of `kind` with the same action.
    pub fn always(self, kind: ReviewKind, action: JournalAction) -> Self {
        self.on(kind, move |_| Some(ExpertDecision::new(action)))
    }

    pub fn for_item(mut self, item_id: impl Into<String>, decision: ExpertDecision) -> Self {
        self.by_item.insert(item_id.into(), decision);
        self
    }

    pub fn asked(&self) -> Vec<String> {
        self.asked.lock().expect("expert lock").clone()
    }
}

impl ExpertSource for ScriptedExpert {
    fn decide(&self, item: &ReviewItem) -> Option<ExpertDecision> {
        self.asked.lock().expect("expert lock").push(item.id.clone());
        if let Some(d) = self.by_item.get(&item.id) {
            return Some(d.clone());
        }
        self.rules.get(&item.kind).and_then(|r| r(item))
    }
}
