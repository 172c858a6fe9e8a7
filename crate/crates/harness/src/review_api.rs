//! HTTP API over [`review`](crate::review) sessions.
//!
//! | Method | Path | Body | Response |
//! |---|---|---|---|
//! | `POST` | `/api/sessions` | `{"reviewer_id": "r1", "seed": 7}` (`seed` optional) | `201` [`SessionView`] |
//! | `GET` | `/api/sessions` | | list of [`SessionView`] |
//! | `GET` | `/api/sessions/{id}` | | [`SessionView`] |
//! | `GET` | `/api/sessions/{id}/next` | | [`NextView`] |
//! | `GET` | `/api/sessions/{id}/items/{index}` | | [`ItemView`] |
//! | `POST` | `/api/sessions/{id}/items/{index}` | `{"selection": "A", "ratings": {"A": 1, "B": 0}}` | [`SubmitAck`] |
//! | `POST` | `/api/sessions/{id}/close` | | [`SessionView`] |
//! | `GET` | `/api/sessions/{id}/items/{index}/image` | | image bytes |
//! | `GET` | `/api/summary` | | [`ReviewSummary`] over closed sessions |
//!
//! Errors are `{"error": "<code>", "message": "..."}` with codes
//! `session_not_found` (404), `item_not_found` (404), `invalid_label` (400),
//! `invalid_rating` (400), `session_closed` (409), `image_unavailable` (404)
//! and `internal` (500).
//!
//! While a session is open no response carries system names; closed
//! sessions add `systems` to [`SessionView`] and `revealed` to [`ItemView`].

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use gozone_core::{BoundingBox, Turn2Output};
use serde::{Deserialize, Serialize};

use crate::review::{
    create_session, summarize, ReasoningFields, ReviewError, ReviewSession, ReviewSummary, SessionStatus,
    SessionStore, SubmitAck,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionView {
    pub session_id: String,
    pub reviewer_id: String,
    pub seed: u64,
    pub status: SessionStatus,
    pub n_items: usize,
    pub n_completed: usize,
    pub next_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub systems: Option<Vec<String>>,
}

impl From<&ReviewSession> for SessionView {
    fn from(s: &ReviewSession) -> Self {
        Self {
            session_id: s.session_id.clone(),
            reviewer_id: s.reviewer_id.clone(),
            seed: s.seed,
            status: s.status,
            n_items: s.items.len(),
            n_completed: s.n_completed(),
            next_index: s.next_index(),
            systems: (s.status == SessionStatus::Closed).then(|| s.systems()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateView {
    pub label: char,
    pub reasoning: ReasoningFields,
    pub predicted_box: Option<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ItemView {
    pub session_id: String,
    pub index: usize,
    pub n_items: usize,
    pub sample_id: String,
    pub image_url: Option<String>,
    pub candidates: Vec<CandidateView>,
    pub selection: Option<char>,
    pub ratings: BTreeMap<char, u8>,
    pub complete: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub revealed: Option<BTreeMap<char, String>>,
}

fn item_view(s: &ReviewSession, index: usize) -> Result<ItemView, ReviewError> {
    let item = s.item(index)?;
    let image_url = item.candidates.first().and_then(|c| c.image_ref.as_deref()).map(|r| {
        if r.starts_with("http://") || r.starts_with("https://") {
            r.to_string()
        } else {
            format!("/api/sessions/{}/items/{index}/image", s.session_id)
        }
    });
    Ok(ItemView {
        session_id: s.session_id.clone(),
        index,
        n_items: s.items.len(),
        sample_id: item.sample_id.clone(),
        image_url,
        candidates: item
            .candidates
            .iter()
            .map(|c| CandidateView {
                label: c.display_label,
                reasoning: c.reasoning.clone(),
                predicted_box: c.predicted_box,
            })
            .collect(),
        selection: item.selection,
        ratings: item.accuracy_ratings.clone(),
        complete: item.is_complete(),
        revealed: (s.status == SessionStatus::Closed).then(|| {
            item.candidates
                .iter()
                .map(|c| (c.display_label, c.hidden_system_id.clone()))
                .collect()
        }),
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NextView {
    pub complete: bool,
    pub n_completed: usize,
    pub n_items: usize,
    pub item: Option<ItemView>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct CreateRequest {
    pub reviewer_id: String,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Deserialize)]
pub struct SubmitRequest {
    pub selection: String,
    #[serde(default)]
    pub ratings: BTreeMap<String, i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    pub message: String,
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self { status, code, message: message.into() }
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl From<ReviewError> for ApiError {
    fn from(e: ReviewError) -> Self {
        let (status, code) = match &e {
            ReviewError::SessionClosed(_) => (StatusCode::CONFLICT, "session_closed"),
            ReviewError::InvalidLabel(_) => (StatusCode::BAD_REQUEST, "invalid_label"),
            ReviewError::InvalidRating { .. } => (StatusCode::BAD_REQUEST, "invalid_rating"),
            ReviewError::ItemOutOfRange { .. } => (StatusCode::NOT_FOUND, "item_not_found"),
            ReviewError::OpenSession(_) => (StatusCode::CONFLICT, "session_open"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody { error: self.code.to_string(), message: self.message };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Review state shared by all handlers.
pub struct ReviewService {
    outputs: BTreeMap<String, Vec<(String, Turn2Output)>>,
    image_refs: BTreeMap<String, String>,
    image_root: PathBuf,
    store: SessionStore,
    base_seed: u64,
    sessions: Mutex<BTreeMap<String, Arc<Mutex<ReviewSession>>>>,
}

impl ReviewService {
    /// Check that the outputs can form a session and load any sessions
    /// already in `store`.
    pub fn new(
        outputs: BTreeMap<String, Vec<(String, Turn2Output)>>,
        image_refs: BTreeMap<String, String>,
        image_root: PathBuf,
        store: SessionStore,
        base_seed: u64,
    ) -> Result<Self, anyhow::Error> {
        create_session("probe", &outputs, "probe", base_seed, &image_refs)?;
        let sessions = store
            .load_all()?
            .into_iter()
            .map(|s| (s.session_id.clone(), Arc::new(Mutex::new(s))))
            .collect();
        Ok(Self { outputs, image_refs, image_root, store, base_seed, sessions: Mutex::new(sessions) })
    }

    fn session(&self, id: &str) -> ApiResult<Arc<Mutex<ReviewSession>>> {
        self.sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "session_not_found", format!("no session {id:?}")))
    }

    /// Create and persist a new session. Without an explicit seed the
    /// service seed is offset by the session number.
    pub fn create(&self, reviewer_id: &str, seed: Option<u64>) -> ApiResult<SessionView> {
        let mut sessions = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        let n = sessions.len() as u64;
        let session_id = format!("session-{:04}", n + 1);
        let seed = seed.unwrap_or(self.base_seed.wrapping_add(n));
        let session = create_session(&session_id, &self.outputs, reviewer_id, seed, &self.image_refs)?;
        self.store.save(&session).map_err(ApiError::internal)?;
        let view = SessionView::from(&session);
        sessions.insert(session_id, Arc::new(Mutex::new(session)));
        Ok(view)
    }

    pub fn list(&self) -> Vec<SessionView> {
        let sessions: Vec<_> = self.sessions.lock().unwrap_or_else(|e| e.into_inner()).values().cloned().collect();
        sessions
            .iter()
            .map(|s| SessionView::from(&*s.lock().unwrap_or_else(|e| e.into_inner())))
            .collect()
    }

    pub fn view(&self, id: &str) -> ApiResult<SessionView> {
        let s = self.session(id)?;
        let s = s.lock().unwrap_or_else(|e| e.into_inner());
        Ok(SessionView::from(&*s))
    }

    pub fn item(&self, id: &str, index: usize) -> ApiResult<ItemView> {
        let s = self.session(id)?;
        let s = s.lock().unwrap_or_else(|e| e.into_inner());
        Ok(item_view(&s, index)?)
    }

    pub fn next(&self, id: &str) -> ApiResult<NextView> {
        let s = self.session(id)?;
        let s = s.lock().unwrap_or_else(|e| e.into_inner());
        let item = s.next_index().map(|i| item_view(&s, i)).transpose()?;
        Ok(NextView {
            complete: item.is_none(),
            n_completed: s.n_completed(),
            n_items: s.items.len(),
            item,
        })
    }

    /// Validate, apply and persist one submission. On a failed write the
    /// in-memory session is left unchanged.
    pub fn submit(&self, id: &str, index: usize, req: &SubmitRequest) -> ApiResult<SubmitAck> {
        let s = self.session(id)?;
        let mut s = s.lock().unwrap_or_else(|e| e.into_inner());
        let mut updated = s.clone();
        let ack = updated.submit(index, &req.selection, &req.ratings)?;
        self.store.save_item(&updated, index).map_err(ApiError::internal)?;
        *s = updated;
        Ok(ack)
    }

    pub fn close(&self, id: &str) -> ApiResult<SessionView> {
        let s = self.session(id)?;
        let mut s = s.lock().unwrap_or_else(|e| e.into_inner());
        let mut updated = s.clone();
        updated.close();
        self.store.save(&updated).map_err(ApiError::internal)?;
        *s = updated;
        Ok(SessionView::from(&*s))
    }

    /// Summary over closed sessions only.
    pub fn summary(&self) -> ApiResult<ReviewSummary> {
        let sessions: Vec<_> = self.sessions.lock().unwrap_or_else(|e| e.into_inner()).values().cloned().collect();
        let closed: Vec<ReviewSession> = sessions
            .iter()
            .map(|s| s.lock().unwrap_or_else(|e| e.into_inner()).clone())
            .filter(|s| s.status == SessionStatus::Closed)
            .collect();
        Ok(summarize(&closed)?)
    }

    pub fn image(&self, id: &str, index: usize) -> ApiResult<(String, Vec<u8>)> {
        let image_ref = {
            let s = self.session(id)?;
            let s = s.lock().unwrap_or_else(|e| e.into_inner());
            s.item(index)?.candidates.first().and_then(|c| c.image_ref.clone())
        };
        let unavailable = || ApiError::new(StatusCode::NOT_FOUND, "image_unavailable", "no local image for this item");
        let image_ref = image_ref.ok_or_else(unavailable)?;
        let path = self.image_root.join(&image_ref);
        let bytes = std::fs::read(&path).map_err(|_| unavailable())?;
        let mime = match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("png") => "image/png",
            Some("jpg" | "jpeg") => "image/jpeg",
            Some("webp") => "image/webp",
            _ => "application/octet-stream",
        };
        Ok((mime.to_string(), bytes))
    }
}

async fn create_h(State(svc): State<Arc<ReviewService>>, Json(req): Json<CreateRequest>) -> ApiResult<Response> {
    let view = svc.create(&req.reviewer_id, req.seed)?;
    Ok((StatusCode::CREATED, Json(view)).into_response())
}

async fn list_h(State(svc): State<Arc<ReviewService>>) -> Json<Vec<SessionView>> {
    Json(svc.list())
}

async fn view_h(State(svc): State<Arc<ReviewService>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    svc.view(&id).map(Json)
}

async fn next_h(State(svc): State<Arc<ReviewService>>, Path(id): Path<String>) -> ApiResult<Json<NextView>> {
    svc.next(&id).map(Json)
}

async fn item_h(
    State(svc): State<Arc<ReviewService>>,
    Path((id, index)): Path<(String, usize)>,
) -> ApiResult<Json<ItemView>> {
    svc.item(&id, index).map(Json)
}

async fn submit_h(
    State(svc): State<Arc<ReviewService>>,
    Path((id, index)): Path<(String, usize)>,
    Json(req): Json<SubmitRequest>,
) -> ApiResult<Json<SubmitAck>> {
    svc.submit(&id, index, &req).map(Json)
}

async fn close_h(State(svc): State<Arc<ReviewService>>, Path(id): Path<String>) -> ApiResult<Json<SessionView>> {
    svc.close(&id).map(Json)
}

async fn summary_h(State(svc): State<Arc<ReviewService>>) -> ApiResult<Json<ReviewSummary>> {
    svc.summary().map(Json)
}

async fn image_h(
    State(svc): State<Arc<ReviewService>>,
    Path((id, index)): Path<(String, usize)>,
) -> ApiResult<Response> {
    let (mime, bytes) = svc.image(&id, index)?;
    Ok(([(header::CONTENT_TYPE, mime)], bytes).into_response())
}

pub fn router(service: Arc<ReviewService>) -> Router {
    Router::new()
        .route("/api/sessions", post(create_h).get(list_h))
        .route("/api/sessions/{id}", get(view_h))
        .route("/api/sessions/{id}/next", get(next_h))
        .route("/api/sessions/{id}/close", post(close_h))
        .route("/api/sessions/{id}/items/{index}", get(item_h).post(submit_h))
        .route("/api/sessions/{id}/items/{index}/image", get(image_h))
        .route("/api/summary", get(summary_h))
        .with_state(service)
}
