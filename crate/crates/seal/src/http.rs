//! JSON API over a session root, for the review UI.

use std::collections::HashSet;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tower_http::services::ServeDir;

use seal_core::goal::{Decision, GoalError};
use seal_core::session::StageName;
use seal_core::{GoalId, Limits, Mode, Session};

use crate::run::{run_session, ProviderChoice, RunRequest};
use crate::store::{Store, StoreError};

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub root: PathBuf,
    /// Provider used by `POST .../run`; runs are refused when unset.
    pub provider: Option<ProviderChoice>,
    pub ui_dir: Option<PathBuf>,
}

struct AppState {
    store: Store,
    provider: Option<ProviderChoice>,
    running: Mutex<HashSet<String>>,
}

impl AppState {
    fn is_running(&self, id: &str) -> bool {
        self.running.lock().unwrap().contains(id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: StatusCode,
    pub code: String,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code: code.to_string(),
            message: message.into(),
        }
    }

    fn unknown_session(id: &str) -> Self {
        ApiError::new(StatusCode::NOT_FOUND, "UnknownSession", format!("no session {id:?}"))
    }

    fn busy(id: &str) -> Self {
        ApiError::new(
            StatusCode::CONFLICT,
            "StageBusy",
            format!("session {id:?} has a run in progress"),
        )
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

impl From<StoreError> for ApiError {
    fn from(e: StoreError) -> Self {
        let status = match e {
            StoreError::NotASession(_) | StoreError::InvalidId(_) => StatusCode::NOT_FOUND,
            StoreError::Locked(_) => return ApiError::new(StatusCode::CONFLICT, "StageBusy", e.to_string()),
            _ => StatusCode::INTERNAL_SERVER_ERROR,
        };
        let code = match e {
            StoreError::NotASession(_) | StoreError::InvalidId(_) => "UnknownSession",
            _ => e.code(),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "InvalidBody", e.body_text())
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Builds the service router.
pub fn router(config: ServiceConfig) -> Router {
    let state = Arc::new(AppState {
        store: Store::new(config.root),
        provider: config.provider,
        running: Mutex::new(HashSet::new()),
    });
    let api = Router::new()
        .route("/api/sessions", get(list_sessions))
        .route("/api/sessions/{id}", get(get_session))
        .route("/api/sessions/{id}/goals", get(get_goals))
        .route("/api/sessions/{id}/goals/{gid}/decision", post(post_decision))
        .route("/api/sessions/{id}/run", post(post_run))
        .route("/api/sessions/{id}/report", get(get_report))
        .route("/api/sessions/{id}/events", get(get_events))
        .with_state(state);
    match config.ui_dir {
        Some(dir) if dir.is_dir() => api.fallback_service(ServeDir::new(dir)),
        _ => api.route("/", get(placeholder)),
    }
}

/// Binds `addr` and serves until interrupted.
pub async fn serve(config: ServiceConfig, addr: SocketAddr) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, router(config))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}

async fn placeholder() -> Html<&'static str> {
    Html(
        "<!doctype html><title>seal</title><p>No review UI assets are installed. \
         Start the service with <code>--ui DIR</code> or use the JSON API under <code>/api</code>.</p>",
    )
}

fn load(state: &AppState, id: &str) -> ApiResult<Session> {
    if !state.store.exists(id) {
        return Err(ApiError::unknown_session(id));
    }
    Ok(state.store.load(id)?)
}

#[derive(Serialize)]
struct SessionSummary {
    id: String,
    actor: String,
    high_goals: usize,
    low_goals: usize,
    coverage: Option<String>,
    awaiting_review: usize,
    running: bool,
}

async fn list_sessions(State(state): State<Arc<AppState>>) -> ApiResult<Json<Vec<SessionSummary>>> {
    let mut out = Vec::new();
    for id in state.store.list()? {
        let Ok(s) = state.store.load(&id) else { continue };
        out.push(SessionSummary {
            actor: s.actor().name.clone(),
            high_goals: s.goals.high_goals().count(),
            low_goals: s.goals.low_goals().count(),
            coverage: s.report.as_ref().map(|r| r.coverage.to_string()),
            awaiting_review: s.awaiting_review().len(),
            running: state.is_running(&id),
            id,
        });
    }
    Ok(Json(out))
}

async fn get_session(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = load(&state, &id)?;
    let mut value = serde_json::to_value(&session).map_err(internal)?;
    if let Some(map) = value.as_object_mut() {
        map.insert("awaiting_review".into(), json!(session.awaiting_review()));
        map.insert("running".into(), json!(state.is_running(&id)));
    }
    Ok(Json(value))
}

fn internal(e: impl std::fmt::Display) -> ApiError {
    ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "Internal", e.to_string())
}

async fn get_goals(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let session = load(&state, &id)?;
    Ok(Json(json!({
        "actor": session.goals.actor,
        "goals": session.goals.iter().collect::<Vec<_>>(),
        "awaiting_review": session.awaiting_review(),
    })))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DecisionBody {
    decision: Decision,
    #[serde(default)]
    reason: Option<String>,
}

fn goal_error(e: GoalError) -> ApiError {
    let status = match e {
        GoalError::UnknownGoal(_) => StatusCode::NOT_FOUND,
        _ => StatusCode::UNPROCESSABLE_ENTITY,
    };
    ApiError::new(status, e.code(), e.to_string())
}

async fn post_decision(
    State(state): State<Arc<AppState>>,
    Path((id, gid)): Path<(String, String)>,
    body: Result<Json<DecisionBody>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(body) = body?;
    if state.is_running(&id) {
        return Err(ApiError::busy(&id));
    }
    if !state.store.exists(&id) {
        return Err(ApiError::unknown_session(&id));
    }
    let goal_id: GoalId = gid
        .parse()
        .map_err(|_| ApiError::new(StatusCode::NOT_FOUND, "UnknownGoal", format!("{gid:?} is not a goal id")))?;
    let store = &state.store;
    let _lock = store.lock(&id)?;
    let mut session = store.load(&id)?;
    let goal = session
        .goals
        .get(&goal_id)
        .ok_or_else(|| goal_error(GoalError::UnknownGoal(goal_id.clone())))?;
    if goal.is_discarded() {
        return Err(goal_error(GoalError::AlreadyDiscarded(goal_id)));
    }
    session
        .apply_decision(&goal_id, body.decision, body.reason.as_deref())
        .map_err(|e| match e {
            seal_core::session::SessionError::Goal(g) => goal_error(g),
            other => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, other.code(), other.to_string()),
        })?;
    store.save(&session)?;
    let payload = json!({"goal_id": goal_id, "decision": body.decision, "reason": body.reason});
    store.append_event(&id, "review_decision", payload)?;
    let goal = session.goals.get(&goal_id).cloned();
    Ok(Json(json!({ "goal": goal, "awaiting_review": session.awaiting_review() })))
}

#[derive(Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RunBody {
    #[serde(default)]
    stage: Option<StageName>,
    #[serde(default)]
    full: Option<bool>,
    #[serde(default)]
    limits: Option<Limits>,
    #[serde(default)]
    interactive: bool,
}

async fn post_run(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<RunBody>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<Value>)> {
    let Json(body) = body?;
    if body.stage.is_some() && body.full == Some(true) {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "InvalidBody",
            "give either a stage or full, not both",
        ));
    }
    if !state.store.exists(&id) {
        return Err(ApiError::unknown_session(&id));
    }
    let provider = state.provider.clone().ok_or_else(|| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "ProviderNotConfigured",
            "the service was started without a provider",
        )
    })?;
    let limits = body.limits.unwrap_or_default();
    if limits.inner_limit == 0 || limits.outer_limit == 0 {
        return Err(ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "InvalidLimits",
            "limits must be at least 1",
        ));
    }
    if !state.running.lock().unwrap().insert(id.clone()) {
        return Err(ApiError::busy(&id));
    }
    // A CLI process may hold the writer lock.
    if let Err(e) = state.store.lock(&id) {
        state.running.lock().unwrap().remove(&id);
        return Err(e.into());
    }
    let cursor = state.store.events(&id, 0).map(|e| e.last().map_or(0, |e| e.seq)).unwrap_or(0);
    let request = RunRequest {
        stage: body.stage,
        limits,
        mode: if body.interactive { Mode::Interactive } else { Mode::Autonomous },
        provider,
    };
    let worker = state.clone();
    let run_id = id.clone();
    tokio::task::spawn_blocking(move || {
        let _ = run_session(&worker.store, &run_id, &request, &mut |_| {});
        worker.running.lock().unwrap().remove(&run_id);
    });
    Ok((StatusCode::ACCEPTED, Json(json!({ "accepted": true, "after": cursor }))))
}

#[derive(Deserialize)]
struct ReportQuery {
    #[serde(default)]
    format: Option<String>,
}

async fn get_report(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ReportQuery>,
) -> ApiResult<Response> {
    let session = load(&state, &id)?;
    let report = session
        .build_report()
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "MapNotRun", e.to_string()))?;
    Ok(match q.format.as_deref() {
        Some("text") => ([(header::CONTENT_TYPE, "text/plain; charset=utf-8")], report.render_text()).into_response(),
        _ => Json(report).into_response(),
    })
}

#[derive(Deserialize)]
struct EventsQuery {
    #[serde(default)]
    after: u64,
}

async fn get_events(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<EventsQuery>,
) -> ApiResult<Json<Value>> {
    if !state.store.exists(&id) {
        return Err(ApiError::unknown_session(&id));
    }
    let events = state.store.events(&id, q.after)?;
    let next = events.last().map_or(q.after, |e| e.seq);
    Ok(Json(json!({
        "events": events,
        "next": next,
        "running": state.is_running(&id),
    })))
}
