use std::convert::Infallible;

use axum::body::Bytes;
use axum::extract::rejection::JsonRejection;
use axum::extract::{FromRequest, Path, Query, Request, State};
use axum::http::header;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use futures::Stream;
use pal_core::cluster::ClusterReport;
use pal_core::labeling::{LabelRequest, RequestStatus};
use pal_core::manifest::Manifest;
use pal_core::pipeline::{Command, CommandOutcome, LabelTarget, PipelineError, SessionKind, SessionOutcome, TrainingSession};
use pal_core::trigger::{RuleDocument, TriggerEvent};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tokio::sync::broadcast::error::RecvError;
use tower_http::cors::CorsLayer;

use crate::{ApiError, AppState, IngestSummary, SCHEMA_VERSION};

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/api/status", get(status))
        .route("/api/label-requests", get(label_requests))
        .route("/api/labels", post(post_label))
        .route("/api/classes", get(classes))
        .route("/api/faces", get(faces))
        .route("/api/events", get(events))
        .route("/api/sessions/start", post(start_session))
        .route("/api/sessions/stop", post(stop_session))
        .route("/api/rules", get(get_rules).put(put_rules))
        .route("/api/ingest", post(ingest))
        .route("/api/cluster", post(cluster))
        .route("/api/clusters", get(clusters))
        .route("/api/frames/{frame_id}/payload", get(payload))
        .layer(CorsLayer::permissive())
        .with_state(state)
}

#[derive(Serialize)]
struct Envelope<T> {
    schema_version: u32,
    data: T,
}

fn ok<T: Serialize>(data: T) -> Json<Envelope<T>> {
    Json(Envelope { schema_version: SCHEMA_VERSION, data })
}

type ApiResult<T> = Result<Json<Envelope<T>>, ApiError>;

/// JSON body whose rejections use the API error envelope.
struct Body<T>(T);

impl<S: Send + Sync, T: DeserializeOwned> FromRequest<S> for Body<T> {
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(Body(v)),
            Err(r) => Err(rejection(r)),
        }
    }
}

fn rejection(r: JsonRejection) -> ApiError {
    ApiError::Body { status: r.status(), message: r.body_text() }
}

fn optional_body<T: DeserializeOwned + Default>(bytes: &Bytes) -> Result<T, ApiError> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Ok(T::default());
    }
    serde_json::from_slice(bytes).map_err(|e| ApiError::InvalidInput(format!("invalid body: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusView {
    pub last_timestamp: Option<i64>,
    pub active_session: Option<TrainingSession>,
    pub classes: usize,
    pub faces: usize,
    pub rules: usize,
    pub buffered_frames: usize,
    pub pending_requests: usize,
    pub retained_payloads: usize,
}

async fn status(State(s): State<AppState>) -> ApiResult<StatusView> {
    Ok(ok(s.read(|p| StatusView {
        last_timestamp: p.last_timestamp(),
        active_session: p.active_session().cloned(),
        classes: p.classes().len(),
        faces: p.faces().len(),
        rules: p.rules().len(),
        buffered_frames: p.buffered_frames(),
        pending_requests: p.label_requests(Some(RequestStatus::Pending)).len(),
        retained_payloads: p.retained_payloads(),
    })))
}

#[derive(Deserialize)]
struct StatusQuery {
    status: Option<String>,
}

fn parse_status(s: &str) -> Result<RequestStatus, ApiError> {
    match s.to_ascii_lowercase().as_str() {
        "pending" => Ok(RequestStatus::Pending),
        "labeled" => Ok(RequestStatus::Labeled),
        "dismissed" => Ok(RequestStatus::Dismissed),
        _ => Err(ApiError::InvalidInput(format!("unknown status `{s}`"))),
    }
}

async fn label_requests(State(s): State<AppState>, Query(q): Query<StatusQuery>) -> ApiResult<Vec<LabelRequest>> {
    let status = q.status.as_deref().map(parse_status).transpose()?;
    Ok(ok(s.read(|p| p.label_requests(status))))
}

/// A label decision; `decided_at` defaults to the pipeline clock.
#[derive(Deserialize)]
struct LabelBody {
    request_id: String,
    #[serde(default)]
    label: Option<String>,
    #[serde(default)]
    dismiss: bool,
    #[serde(default)]
    decided_at: Option<i64>,
}

async fn post_label(State(s): State<AppState>, Body(b): Body<LabelBody>) -> ApiResult<LabelRequest> {
    if b.dismiss == b.label.is_some() {
        return Err(ApiError::InvalidInput("give exactly one of `label` or `dismiss: true`".into()));
    }
    let outcome = s.apply_with(|p| {
        Ok(Command::Label {
            target: LabelTarget::Request(b.request_id),
            label: b.label,
            dismiss: b.dismiss,
            at: b.decided_at.unwrap_or_else(|| p.last_timestamp().unwrap_or_default()),
        })
    })?;
    match outcome {
        CommandOutcome::Labeled(r) => Ok(ok(r)),
        other => unreachable!("label command produced {other:?}"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassView {
    pub label: String,
    pub example_count: u64,
    pub created_at: i64,
}

async fn classes(State(s): State<AppState>) -> ApiResult<Vec<ClassView>> {
    Ok(ok(s.read(|p| {
        p.classes()
            .iter()
            .map(|c| ClassView { label: c.label.clone(), example_count: c.example_count, created_at: c.created_at })
            .collect()
    })))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceView {
    pub person: String,
    pub templates: usize,
    pub created_at: i64,
}

async fn faces(State(s): State<AppState>) -> ApiResult<Vec<FaceView>> {
    Ok(ok(s.read(|p| {
        p.faces()
            .iter()
            .map(|f| FaceView { person: f.person.clone(), templates: f.templates.len(), created_at: f.created_at })
            .collect()
    })))
}

async fn events(State(s): State<AppState>) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let stream = futures::stream::unfold(s.subscribe(), |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(ev) => return Some((Ok(trigger_event(&ev)), rx)),
                Err(RecvError::Lagged(n)) => tracing::warn!(skipped = n, "event subscriber lagged"),
                Err(RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

fn trigger_event(ev: &TriggerEvent) -> Event {
    Event::default().event("trigger").data(serde_json::to_string(ev).expect("trigger events serialize"))
}

#[derive(Deserialize)]
struct StartBody {
    kind: SessionKind,
    label: String,
    #[serde(default)]
    at: Option<i64>,
}

async fn start_session(State(s): State<AppState>, Body(b): Body<StartBody>) -> ApiResult<TrainingSession> {
    let outcome = s.apply_with(|p| {
        Ok(Command::StartSession {
            kind: b.kind,
            label: b.label,
            at: b.at.unwrap_or_else(|| p.last_timestamp().unwrap_or_default()),
        })
    })?;
    match outcome {
        CommandOutcome::SessionStarted(t) => Ok(ok(t)),
        other => unreachable!("start command produced {other:?}"),
    }
}

#[derive(Default, Deserialize)]
struct StopBody {
    #[serde(default)]
    at: Option<i64>,
}

async fn stop_session(State(s): State<AppState>, body: Bytes) -> ApiResult<SessionOutcome> {
    let b: StopBody = optional_body(&body)?;
    let outcome = s.apply_with(|p| {
        let at = match (b.at, p.active_session()) {
            (Some(at), _) => at,
            (None, Some(session)) => p.last_timestamp().unwrap_or_default().max(session.started_at + 1),
            (None, None) => return Err(PipelineError::NoActiveSession.into()),
        };
        Ok(Command::StopSession { at })
    })?;
    match outcome {
        CommandOutcome::SessionStopped(o) => Ok(ok(o)),
        other => unreachable!("stop command produced {other:?}"),
    }
}

async fn get_rules(State(s): State<AppState>) -> ApiResult<RuleDocument> {
    Ok(ok(s.read(|p| RuleDocument::new(p.rules().to_vec()))))
}

async fn put_rules(State(s): State<AppState>, body: Result<Json<RuleDocument>, JsonRejection>) -> ApiResult<RuleDocument> {
    let Json(doc) = body.map_err(|r| match r {
        JsonRejection::JsonDataError(e) => ApiError::InvalidInput(e.body_text()),
        other => rejection(other),
    })?;
    doc.validate().map_err(PipelineError::from)?;
    s.apply(Command::SetRules(doc.rules))?;
    Ok(ok(s.read(|p| RuleDocument::new(p.rules().to_vec()))))
}

async fn ingest(State(s): State<AppState>, body: String) -> ApiResult<IngestSummary> {
    Ok(ok(s.ingest_manifest(&Manifest::parse(&body)?)?))
}

#[derive(Default, Deserialize)]
struct ClusterBody {
    #[serde(default)]
    at: Option<i64>,
    #[serde(default)]
    since: Option<i64>,
}

async fn cluster(State(s): State<AppState>, body: Bytes) -> ApiResult<Vec<ClusterReport>> {
    let b: ClusterBody = optional_body(&body)?;
    let outcome = s.apply_with(|p| {
        Ok(Command::Recluster { at: b.at.unwrap_or_else(|| p.last_timestamp().unwrap_or_default()), since: b.since })
    })?;
    match outcome {
        CommandOutcome::Reclustered(r) => Ok(ok(r)),
        other => unreachable!("recluster command produced {other:?}"),
    }
}

async fn clusters(State(s): State<AppState>) -> ApiResult<Vec<ClusterReport>> {
    Ok(ok(s.read(|p| p.reports().to_vec())))
}

async fn payload(State(s): State<AppState>, Path(frame_id): Path<String>) -> Result<impl IntoResponse, ApiError> {
    s.read(|p| {
        if !p.config().retain_payloads {
            return Err(ApiError::NotFound("payload retention is disabled".into()));
        }
        match p.payload(&frame_id) {
            Some(bytes) => Ok(([(header::CONTENT_TYPE, "application/octet-stream")], bytes.to_vec())),
            None => Err(ApiError::NotFound(format!("no retained payload for `{frame_id}`"))),
        }
    })
}
