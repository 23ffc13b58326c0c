//! JSON review service over a workspace.
//!
//! Reads answer from the current store snapshot. Decisions go through the
//! store's single writer and reach disk before the new snapshot is published,
//! so a decision the client saw acknowledged is never lost and never recorded
//! twice.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::Utc;
use conceptpath::kgstore::{
    save_review_tables, Actor, ConceptTable, JournalAction, ReviewItem, ReviewJournalEntry, ReviewKind, ReviewState,
    SharedStore, Store, StoreError, TransitionError,
};
use conceptpath::pipeline::{ConceptEdit, Counters, RunStatus, Stage, StageReport};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const DEFAULT_PAGE: usize = 50;
pub const MAX_PAGE: usize = 500;

/// Re-runs a parked work once its review items are all decided.
pub trait Resume: Send + Sync {
    fn resume(&self, shared: &SharedStore, work_id: &str) -> anyhow::Result<()>;
}

pub struct ApiState {
    pub shared: SharedStore,
    pub workspace: PathBuf,
    pub resumer: Option<Arc<dyn Resume>>,
}

impl ApiState {
    pub fn new(shared: SharedStore, workspace: PathBuf) -> Self {
        ApiState {
            shared,
            workspace,
            resumer: None,
        }
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    body: Value,
}

impl ApiError {
    fn new(status: StatusCode, message: impl Into<String>) -> Self {
        ApiError {
            status,
            body: json!({ "error": message.into() }),
        }
    }

    fn not_found(what: &str, id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, format!("unknown {what} `{id}`"))
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

pub fn router(state: Arc<ApiState>) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/items/{id}", get(item_detail))
        .route("/api/items/{id}/decision", post(decide))
        .route("/api/works/{id}", get(work_detail))
        .route("/api/stats", get(stats))
        .with_state(state)
}

#[derive(Debug, Default, Deserialize)]
pub struct QueueParams {
    pub state: Option<String>,
    pub kind: Option<String>,
    pub work: Option<String>,
    pub cursor: Option<String>,
    pub limit: Option<usize>,
}

#[derive(Debug, Serialize)]
pub struct QueuePage {
    pub items: Vec<ReviewItem>,
    pub total: usize,
    pub next_cursor: Option<String>,
}

fn bad_request(e: String) -> ApiError {
    ApiError::new(StatusCode::BAD_REQUEST, e)
}

/// Filtered queue in (created_at, id) order. The cursor is the id of the
/// last item of the previous page.
pub fn queue_page(store: &Store, params: &QueueParams) -> Result<QueuePage, ApiError> {
    let state: Option<ReviewState> = params
        .state
        .as_deref()
        .map(str::parse)
        .transpose()
        .map_err(bad_request)?;
    let kind: Option<ReviewKind> = params
        .kind
        .as_deref()
        .map(str::parse)
        .transpose()
        .map_err(bad_request)?;
    let limit = params.limit.unwrap_or(DEFAULT_PAGE).clamp(1, MAX_PAGE);

    let mut items: Vec<&ReviewItem> = store
        .review_items()
        .iter()
        .filter(|i| state.is_none_or(|s| i.state == s))
        .filter(|i| kind.is_none_or(|k| i.kind == k))
        .filter(|i| params.work.as_deref().is_none_or(|w| i.work_id == w))
        .collect();
    items.sort_by(|a, b| (a.created_at, &a.id).cmp(&(b.created_at, &b.id)));
    let total = items.len();

    let start = match &params.cursor {
        None => 0,
        Some(c) => {
            let after = store
                .review_item(c)
                .ok_or_else(|| bad_request(format!("cursor `{c}` does not name an item")))?;
            items.partition_point(|i| (i.created_at, &i.id) <= (after.created_at, &after.id))
        }
    };
    let page: Vec<ReviewItem> = items.iter().skip(start).take(limit).map(|i| (*i).clone()).collect();
    let next_cursor = (start + page.len() < total)
        .then(|| page.last().map(|i| i.id.clone()))
        .flatten();
    Ok(QueuePage {
        items: page,
        total,
        next_cursor,
    })
}

async fn queue(State(st): State<Arc<ApiState>>, Query(params): Query<QueueParams>) -> ApiResult<QueuePage> {
    queue_page(&st.shared.snapshot(), &params).map(Json)
}

/// Journal entry with the expert's note lifted out of the payload.
fn journal_json(entry: Option<&ReviewJournalEntry>) -> Value {
    let Some(entry) = entry else {
        return Value::Null;
    };
    let mut v = serde_json::to_value(entry).expect("plain struct");
    v["note"] = entry.payload.get("note").cloned().unwrap_or(Value::Null);
    v
}

fn hierarchy_json(store: &Store, nodes: impl IntoIterator<Item = String>, edges: &[(String, String)]) -> Value {
    let nodes: Vec<Value> = nodes
        .into_iter()
        .map(|id| match store.concept(&id) {
            Some(c) => json!({"id": id, "name": c.name, "level": c.level}),
            None => json!({"id": id, "name": null, "level": null}),
        })
        .collect();
    json!({"nodes": nodes, "edges": edges})
}

async fn item_detail(State(st): State<Arc<ApiState>>, Path(id): Path<String>) -> ApiResult<Value> {
    let store = st.shared.snapshot();
    let item = store.review_item(&id).ok_or_else(|| ApiError::not_found("item", &id))?;
    let work = store.work(&item.work_id);
    let run = store.run(&item.work_id);
    let hierarchy = run.map(|r| {
        let edges: Vec<(String, String)> = r.hierarchy.edges.iter().cloned().collect();
        hierarchy_json(&store, r.hierarchy.nodes.iter().cloned(), &edges)
    });
    let legal: Vec<&str> = if item.is_pending() {
        item.kind.legal_actions().iter().map(JournalAction::as_str).collect()
    } else {
        Vec::new()
    };
    Ok(Json(json!({
        "item": item,
        "legal_actions": legal,
        "decision": journal_json(store.decision_for(&id)),
        "work": work.map(|w| json!({
            "id": w.id,
            "title": w.title,
            "abstract_text": w.abstract_text,
            "publication_date": w.publication_date,
        })),
        "segments": run.and_then(|r| r.segments.as_ref()),
        "hierarchy": hierarchy,
    })))
}

#[derive(Debug, Clone, Deserialize)]
pub struct DecisionBody {
    pub action: String,
    #[serde(default)]
    pub note: Option<String>,
    #[serde(default)]
    pub concept_edit: Option<ConceptEdit>,
}

/// What happens to the item's work after the decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Resumption {
    /// The work is not parked on review.
    None,
    /// Other items of the work are still pending.
    Waiting,
    /// The pipeline re-runs the work in the background.
    Scheduled,
    /// No backend is attached; the next `pipeline run` picks the work up.
    NextRun,
}

fn record(st: &ApiState, id: &str, body: DecisionBody) -> Result<ReviewItem, ApiError> {
    let action: JournalAction = body
        .action
        .parse()
        .map_err(|e: String| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e))?;
    let mut payload = serde_json::Map::new();
    if let Some(note) = body.note {
        payload.insert("note".into(), Value::String(note));
    }
    if let Some(edit) = body.concept_edit {
        payload.insert("concept_edit".into(), serde_json::to_value(edit).expect("plain struct"));
    }
    st.shared
        .write(|s| {
            let item = s
                .decide(id, Actor::Expert, action, Value::Object(payload), Utc::now())?
                .clone();
            save_review_tables(s, &st.workspace)?;
            Ok::<_, StoreError>(item)
        })
        .map_err(|e| match e {
            StoreError::UnknownItem(_) => ApiError::not_found("item", id),
            StoreError::Transition(TransitionError::IllegalAction { .. }) => {
                ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, e.to_string())
            }
            StoreError::Transition(TransitionError::AlreadyDecided { .. }) => {
                let current = st.shared.snapshot().review_item(id).cloned();
                ApiError {
                    status: StatusCode::CONFLICT,
                    body: json!({"error": e.to_string(), "item": current}),
                }
            }
            other => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, other.to_string()),
        })
}

fn resumption(store: &Store, work_id: &str, has_resumer: bool) -> Resumption {
    let Some(run) = store.run(work_id) else {
        return Resumption::None;
    };
    if run.status != RunStatus::AwaitingReview {
        return Resumption::None;
    }
    let open = run
        .parked_on
        .iter()
        .any(|i| store.review_item(i).is_none_or(ReviewItem::is_pending));
    match (open, has_resumer) {
        (true, _) => Resumption::Waiting,
        (false, true) => Resumption::Scheduled,
        (false, false) => Resumption::NextRun,
    }
}

async fn decide(
    State(st): State<Arc<ApiState>>,
    Path(id): Path<String>,
    body: axum::body::Bytes,
) -> Result<Json<Value>, ApiError> {
    let body: DecisionBody = serde_json::from_slice(&body).map_err(|e| bad_request(format!("decision body: {e}")))?;
    let task_state = st.clone();
    let task_id = id.clone();
    let item = tokio::task::spawn_blocking(move || record(&task_state, &task_id, body))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;

    let snapshot = st.shared.snapshot();
    let next = resumption(&snapshot, &item.work_id, st.resumer.is_some());
    if next == Resumption::Scheduled {
        let resumer = st.resumer.clone().expect("checked above");
        let state = st.clone();
        let work = item.work_id.clone();
        tokio::task::spawn_blocking(move || {
            if let Err(e) = resumer.resume(&state.shared, &work) {
                log::error!("resuming {work} failed: {e:#}");
            }
        });
    }
    Ok(Json(json!({
        "item": item,
        "journal_entry": journal_json(snapshot.decision_for(&id)),
        "resumption": next,
    })))
}

async fn work_detail(State(st): State<Arc<ApiState>>, Path(id): Path<String>) -> ApiResult<Value> {
    let store = st.shared.snapshot();
    let work = store.work(&id).ok_or_else(|| ApiError::not_found("work", &id))?;
    let run = store.run(&id);
    let paths: Vec<_> = store.paths().iter().filter(|p| p.work_id == id).collect();
    let items: Vec<&str> = store
        .review_items()
        .iter()
        .filter(|i| i.work_id == id)
        .map(|i| i.id.as_str())
        .collect();
    Ok(Json(json!({
        "work": work,
        "status": run.map(|r| r.status),
        "error": run.and_then(|r| r.error.as_ref()),
        "segments": run.and_then(|r| r.segments.as_ref()),
        "pairs": run.map(|r| &r.pairs),
        "triplets": run.map(|r| &r.triplets),
        "refinements": run.map(|r| &r.refinements),
        "hierarchy": run.map(|r| {
            let edges: Vec<(String, String)> = r.hierarchy.edges.iter().cloned().collect();
            hierarchy_json(&store, r.hierarchy.nodes.iter().cloned(), &edges)
        }),
        "parked_on": run.map(|r| &r.parked_on),
        "paths": paths,
        "review_items": items,
    })))
}

#[derive(Debug, Default, Serialize)]
pub struct Stats {
    pub pending: usize,
    pub decided: usize,
    pub pending_by_kind: BTreeMap<&'static str, usize>,
    pub journal_entries: usize,
    pub works: usize,
    pub concepts: usize,
    pub runs: BTreeMap<String, usize>,
    pub stages: BTreeMap<Stage, StageReport>,
    pub counters: Counters,
}

pub fn compute_stats(store: &Store) -> Stats {
    let mut s = Stats {
        journal_entries: store.journal().len(),
        works: store.works().len(),
        concepts: store.concepts().len(),
        ..Stats::default()
    };
    for item in store.review_items() {
        if item.is_pending() {
            s.pending += 1;
            *s.pending_by_kind.entry(item.kind.as_str()).or_default() += 1;
        } else {
            s.decided += 1;
        }
    }
    for run in store.runs() {
        let status = serde_json::to_value(run.status)
            .expect("enum")
            .as_str()
            .unwrap_or_default()
            .to_string();
        *s.runs.entry(status).or_default() += 1;
        for (stage, r) in &run.stages {
            let acc = s.stages.entry(*stage).or_default();
            acc.calls += r.calls;
            acc.cached += r.cached;
            acc.retries += r.retries;
            acc.parse_failures += r.parse_failures;
            acc.elapsed_ms += r.elapsed_ms;
        }
        let c = &run.counters;
        s.counters.hallucinations += c.hallucinations;
        s.counters.level_order_rejections += c.level_order_rejections;
        s.counters.review_routed += c.review_routed;
        s.counters.kb_timeouts += c.kb_timeouts;
        s.counters.prompt_tokens += c.prompt_tokens;
        s.counters.completion_tokens += c.completion_tokens;
    }
    s
}

async fn stats(State(st): State<Arc<ApiState>>) -> ApiResult<Stats> {
    Ok(Json(compute_stats(&st.shared.snapshot())))
}
