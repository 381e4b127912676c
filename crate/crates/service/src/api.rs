//! HTTP+JSON API and the server-sent event feed.
//!
//! Errors come back as `{"error": {"code": "...", "message": "..."}}`.

use std::convert::Infallible;
use std::sync::Arc;

use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use chrono::{DateTime, Utc};
use doorwatch_core::door::{CommandKind, DoorMode};
use doorwatch_core::face_geometry::{guide_capture, CaptureGuidance, FaceBox};
use doorwatch_core::store::{NewPerson, Period, StoreError, ViewImage};
use futures::Stream;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tokio::sync::broadcast;

use crate::app::{App, AppError};
use crate::door_actor::DoorActorError;
use crate::pipeline::decode_image;

pub const TOKEN_HEADER: &str = "x-operator-token";

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "invalid_argument", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({"error": {"code": self.code, "message": self.message}});
        (self.status, Json(body)).into_response()
    }
}

impl From<AppError> for ApiError {
    fn from(e: AppError) -> Self {
        let msg = e.to_string();
        match e {
            AppError::Store(StoreError::NotFound(_)) => Self::not_found(msg),
            AppError::Store(StoreError::DuplicatePerson { .. }) => {
                Self::new(StatusCode::CONFLICT, "duplicate_person", msg)
            }
            AppError::Store(StoreError::AllViewsRejected(rejected)) => Self {
                status: StatusCode::UNPROCESSABLE_ENTITY,
                code: "views_rejected",
                message: serde_json::to_string(&rejected).unwrap_or(msg),
            },
            AppError::Store(StoreError::InvalidArgument(_)) => Self::bad_request(msg),
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", msg),
        }
    }
}

impl From<DoorActorError> for ApiError {
    fn from(e: DoorActorError) -> Self {
        match e {
            DoorActorError::Command(e) => Self::bad_request(e.to_string()),
            DoorActorError::Stopped => {
                Self::new(StatusCode::SERVICE_UNAVAILABLE, "door_unavailable", e.to_string())
            }
        }
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(app: Arc<App>) -> Router {
    Router::new()
        .route("/health", get(|| async { Json(json!({"status": "ok"})) }))
        .route("/events", get(list_events))
        .route("/events/stream", get(event_stream))
        .route("/events/{id}", get(get_event))
        .route("/events/{id}/scene", get(get_scene))
        .route("/door", get(door_status))
        .route("/door/open", post(door_open))
        .route("/door/close", post(door_close))
        .route("/summary", get(summary))
        .route("/profiles", get(list_profiles).post(create_profile))
        .route("/profiles/guidance", post(guidance))
        .route("/profiles/{id}", axum::routing::delete(delete_profile))
        .route("/profiles/{id}/views", post(add_views))
        .with_state(app)
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

#[derive(Debug, Deserialize)]
struct SinceQuery {
    #[serde(default)]
    since: u64,
}

async fn list_events(State(app): State<Arc<App>>, Query(q): Query<SinceQuery>) -> impl IntoResponse {
    Json(app.store().events_since(q.since).to_vec())
}

async fn get_event(State(app): State<Arc<App>>, Path(id): Path<u64>) -> ApiResult<impl IntoResponse> {
    app.store()
        .event(id)
        .cloned()
        .map(Json)
        .ok_or_else(|| ApiError::not_found(format!("event {id} not found")))
}

async fn get_scene(State(app): State<Arc<App>>, Path(id): Path<u64>) -> ApiResult<impl IntoResponse> {
    let path = {
        let store = app.store();
        let e = store
            .event(id)
            .ok_or_else(|| ApiError::not_found(format!("event {id} not found")))?;
        store.root().join(&e.scene_image)
    };
    let bytes = tokio::fs::read(&path)
        .await
        .map_err(|e| ApiError::not_found(format!("scene image for event {id}: {e}")))?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes))
}

async fn event_stream(
    State(app): State<Arc<App>>,
) -> Sse<impl Stream<Item = Result<Event, Infallible>>> {
    let rx = app.subscribe();
    let stream = futures::stream::unfold(rx, |mut rx| async move {
        loop {
            match rx.recv().await {
                Ok(e) => {
                    let ev = Event::default()
                        .event("event")
                        .id(e.event_id.to_string())
                        .json_data(&e)
                        .expect("event serializes");
                    return Some((Ok(ev), rx));
                }
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::warn!(missed = n, "event stream subscriber lagged");
                }
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    Sse::new(stream).keep_alive(KeepAlive::default())
}

async fn door_status(State(app): State<Arc<App>>) -> ApiResult<Json<DoorMode>> {
    let door = app.door().clone();
    let state = blocking(move || Ok(door.state()?)).await?;
    Ok(Json(state.mode))
}

#[derive(Debug, Default, Deserialize)]
struct TokenQuery {
    token: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
struct DoorBody {
    correlation: Option<u64>,
}

fn operator(app: &App, headers: &HeaderMap, q: &TokenQuery) -> ApiResult<String> {
    let token = headers
        .get(TOKEN_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::to_string)
        .or_else(|| q.token.clone())
        .filter(|t| !t.trim().is_empty())
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthenticated", "operator token required"))?;
    if app.config().operators.contains(&token) {
        Ok(token)
    } else {
        Err(ApiError::new(
            StatusCode::FORBIDDEN,
            "forbidden",
            "operator token is not on the allow-list",
        ))
    }
}

#[derive(Debug, Serialize)]
struct DoorReply {
    outcome: doorwatch_core::door::AuditOutcome,
    detail: Option<String>,
    #[serde(flatten)]
    mode: DoorMode,
}

async fn door_command(
    app: Arc<App>,
    kind: CommandKind,
    headers: HeaderMap,
    q: TokenQuery,
    body: Option<Json<DoorBody>>,
) -> ApiResult<Json<DoorReply>> {
    let op = operator(&app, &headers, &q)?;
    let correlation = body.and_then(|b| b.0.correlation);
    let door = app.door().clone();
    let (audit, state) = blocking(move || Ok(door.command(kind, &op, correlation)?)).await?;
    Ok(Json(DoorReply {
        outcome: audit.outcome,
        detail: audit.detail,
        mode: state.mode,
    }))
}

async fn door_open(
    State(app): State<Arc<App>>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
    body: Option<Json<DoorBody>>,
) -> ApiResult<Json<DoorReply>> {
    door_command(app, CommandKind::Open, headers, q, body).await
}

async fn door_close(
    State(app): State<Arc<App>>,
    headers: HeaderMap,
    Query(q): Query<TokenQuery>,
    body: Option<Json<DoorBody>>,
) -> ApiResult<Json<DoorReply>> {
    door_command(app, CommandKind::Close, headers, q, body).await
}

#[derive(Debug, Deserialize)]
struct SummaryQuery {
    period: Option<String>,
    anchor: Option<DateTime<Utc>>,
}

async fn summary(State(app): State<Arc<App>>, Query(q): Query<SummaryQuery>) -> ApiResult<impl IntoResponse> {
    let period: Period = q
        .period
        .as_deref()
        .unwrap_or("daily")
        .parse()
        .map_err(|e: StoreError| ApiError::bad_request(e.to_string()))?;
    let anchor = q.anchor.unwrap_or_else(|| app.clock().now());
    Ok(Json(app.store().query_summary(period, anchor)))
}

async fn list_profiles(State(app): State<Arc<App>>) -> impl IntoResponse {
    Json(app.persons())
}

/// An uploaded enrollment picture.
#[derive(Debug, Deserialize)]
pub struct ViewUpload {
    /// Base64 PNG, JPEG or binary PGM.
    pub image: String,
    pub face_box: Option<[usize; 4]>,
    pub pose: Option<String>,
}

fn decode_views(views: Vec<ViewUpload>) -> ApiResult<Vec<ViewImage>> {
    if views.is_empty() {
        return Err(ApiError::bad_request("at least one view is required"));
    }
    views
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(v.image.as_bytes())
                .map_err(|e| ApiError::bad_request(format!("view {i}: bad base64: {e}")))?;
            let frame = decode_image(&bytes)
                .map_err(|e| ApiError::bad_request(format!("view {i}: {e}")))?;
            let face = v
                .face_box
                .map(|[x, y, w, h]| FaceBox::new(x, y, w, h))
                .transpose()
                .map_err(|e| ApiError::bad_request(format!("view {i}: {e}")))?;
            Ok(ViewImage {
                frame,
                face,
                pose: v.pose,
            })
        })
        .collect()
}

#[derive(Debug, Deserialize)]
struct CreateProfile {
    #[serde(flatten)]
    person: NewPerson,
    views: Vec<ViewUpload>,
    #[serde(default)]
    allow_duplicate: bool,
}

async fn create_profile(
    State(app): State<Arc<App>>,
    Json(req): Json<CreateProfile>,
) -> ApiResult<impl IntoResponse> {
    let views = decode_views(req.views)?;
    let added = blocking(move || Ok(app.add_person(req.person, views, req.allow_duplicate)?)).await?;
    Ok((StatusCode::CREATED, Json(added)))
}

#[derive(Debug, Deserialize)]
struct AddViews {
    views: Vec<ViewUpload>,
}

async fn add_views(
    State(app): State<Arc<App>>,
    Path(id): Path<u64>,
    Json(req): Json<AddViews>,
) -> ApiResult<impl IntoResponse> {
    let views = decode_views(req.views)?;
    let added = blocking(move || Ok(app.add_views(id, views)?)).await?;
    Ok(Json(added))
}

async fn delete_profile(State(app): State<Arc<App>>, Path(id): Path<u64>) -> ApiResult<impl IntoResponse> {
    let removed = blocking(move || Ok(app.delete_person(id)?)).await?;
    Ok(Json(json!({"subject_id": id, "views_removed": removed})))
}

#[derive(Debug, Deserialize)]
struct GuidanceRequest {
    /// Either the frame size, or the frame itself as base64.
    width: Option<usize>,
    height: Option<usize>,
    image: Option<String>,
    face_box: [usize; 4],
}

#[derive(Debug, Serialize, PartialEq, Eq)]
pub struct GuidanceReply {
    pub guidance: CaptureGuidance,
    pub phrase: &'static str,
}

async fn guidance(Json(req): Json<GuidanceRequest>) -> ApiResult<Json<GuidanceReply>> {
    let (width, height) = match (req.width, req.height, &req.image) {
        (Some(w), Some(h), _) => (w, h),
        (_, _, Some(img)) => {
            let bytes = base64::engine::general_purpose::STANDARD
                .decode(img.as_bytes())
                .map_err(|e| ApiError::bad_request(format!("bad base64: {e}")))?;
            let f = decode_image(&bytes).map_err(ApiError::bad_request)?;
            (f.width(), f.height())
        }
        _ => return Err(ApiError::bad_request("give width and height, or image")),
    };
    let [x, y, w, h] = req.face_box;
    let face = FaceBox::new(x, y, w, h).map_err(|e| ApiError::bad_request(e.to_string()))?;
    let g = guide_capture(width, height, &face);
    Ok(Json(GuidanceReply {
        guidance: g,
        phrase: g.phrase(),
    }))
}
