use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewKind {
    Segmentation,
    Pair,
    Triplet,
    Refinement,
}

impl ReviewKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReviewKind::Segmentation => "segmentation",
            ReviewKind::Pair => "pair",
            ReviewKind::Triplet => "triplet",
            ReviewKind::Refinement => "refinement",
        }
    }

    /// Decision actions an expert may submit for this kind of item.
    pub fn legal_actions(&self) -> &'static [JournalAction] {
        use JournalAction::*;
        match self {
            ReviewKind::Segmentation => &[Annotate, Reject],
            ReviewKind::Pair => &[Approve, Reject, Annotate],
            ReviewKind::Triplet => &[Approve, Reject],
            ReviewKind::Refinement => &[Approve, Reject, Add, Delete, Keep],
        }
    }

    pub fn allows(&self, action: JournalAction) -> bool {
        self.legal_actions().contains(&action)
    }
}

impl std::str::FromStr for ReviewKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "segmentation" => Ok(ReviewKind::Segmentation),
            "pair" => Ok(ReviewKind::Pair),
            "triplet" => Ok(ReviewKind::Triplet),
            "refinement" => Ok(ReviewKind::Refinement),
            other => Err(format!("unknown review kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReviewState {
    Pending,
    Approved,
    Rejected,
    Annotated,
}

impl std::str::FromStr for ReviewState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pending" => Ok(ReviewState::Pending),
            "approved" => Ok(ReviewState::Approved),
            "rejected" => Ok(ReviewState::Rejected),
            "annotated" => Ok(ReviewState::Annotated),
            other => Err(format!("unknown review state `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Actor {
    Expert,
    System,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JournalAction {
    Approve,
    Reject,
    Annotate,
    Add,
    Delete,
    Keep,
}

impl JournalAction {
    pub fn as_str(&self) -> &'static str {
        match self {
            JournalAction::Approve => "approve",
            JournalAction::Reject => "reject",
            JournalAction::Annotate => "annotate",
            JournalAction::Add => "add",
            JournalAction::Delete => "delete",
            JournalAction::Keep => "keep",
        }
    }

    /// State an item lands in once this action is recorded on it.
    pub fn resulting_state(&self) -> ReviewState {
        match self {
            JournalAction::Approve | JournalAction::Add | JournalAction::Delete => ReviewState::Approved,
            JournalAction::Reject | JournalAction::Keep => ReviewState::Rejected,
            JournalAction::Annotate => ReviewState::Annotated,
        }
    }
}

impl std::str::FromStr for JournalAction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        serde_json::from_value(Value::String(s.to_string())).map_err(|_| format!("unknown action `{s}`"))
    }
}

/// A pending (or decided) human decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub kind: ReviewKind,
    pub work_id: String,
    pub payload: Value,
    pub state: ReviewState,
    pub created_at: DateTime<Utc>,
    #[serde(default)]
    pub decided_at: Option<DateTime<Utc>>,
}

impl ReviewItem {
    pub fn pending(id: String, kind: ReviewKind, work_id: &str, payload: Value, now: DateTime<Utc>) -> Self {
        ReviewItem {
            id,
            kind,
            work_id: work_id.to_string(),
            payload,
            state: ReviewState::Pending,
            created_at: now,
            decided_at: None,
        }
    }

    pub fn is_pending(&self) -> bool {
        self.state == ReviewState::Pending
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewJournalEntry {
    pub item_id: String,
    pub timestamp: DateTime<Utc>,
    pub actor: Actor,
    pub action: JournalAction,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransitionError {
    #[error("item `{id}` is already {state:?}")]
    AlreadyDecided { id: String, state: ReviewState },
    #[error("action `{action}` is not legal for {kind} items")]
    IllegalAction { kind: &'static str, action: &'static str },
}
