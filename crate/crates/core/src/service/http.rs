//! HTTP front end. Mutating calls run on the blocking pool because the
//! pipeline may wait on a model provider.

use super::{CreateIncident, Engine, ServiceError, StreamRecord};
use crate::memory::{KcaPatch, PlaybookDoc, ReviewOp, ReviewResult};
use crate::perception::RawSignal;
use crate::reasoning::FeedbackInput;
use axum::body::Body;
use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use futures::stream;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::sync::Arc;

#[derive(Clone)]
pub struct AppState {
    engine: Arc<Engine>,
    token: Option<Arc<str>>,
}

/// Error body shared by every endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
}

pub struct ApiError {
    status: StatusCode,
    body: ErrorBody,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ErrorBody {
                code: code.to_string(),
                message: message.into(),
            },
        }
    }
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        let status = StatusCode::from_u16(e.status()).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        if status.is_server_error() {
            tracing::error!(error = %e, "request failed");
        }
        ApiError::new(status, e.code(), e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(self.body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Extracts JSON bodies, reporting failures in the shared error shape.
struct JsonBody<T>(T);

impl<S, T> axum::extract::FromRequest<S> for JsonBody<T>
where
    T: serde::de::DeserializeOwned,
    S: Send + Sync,
{
    type Rejection = ApiError;

    async fn from_request(req: Request, state: &S) -> Result<Self, Self::Rejection> {
        match Json::<T>::from_request(req, state).await {
            Ok(Json(v)) => Ok(JsonBody(v)),
            Err(rej) => Err(ApiError::new(
                StatusCode::UNPROCESSABLE_ENTITY,
                "invalid_body",
                rej.body_text(),
            )),
        }
    }
}

async fn blocking<T, F>(f: F) -> ApiResult<T>
where
    F: FnOnce() -> Result<T, ServiceError> + Send + 'static,
    T: Send + 'static,
{
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
        .map_err(ApiError::from)
}

fn actor(headers: &HeaderMap) -> String {
    headers
        .get("x-outage-actor")
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .unwrap_or("expert")
        .to_string()
}

/// Builds the router. `token`, when set, is required as a bearer token on
/// every route except `/healthz`.
pub fn router(engine: Arc<Engine>, token: Option<String>) -> Router {
    let state = AppState {
        engine,
        token: token.filter(|t| !t.is_empty()).map(Arc::from),
    };
    let api = Router::new()
        .route("/incidents", post(create_incident).get(list_incidents))
        .route("/incidents/{id}", get(get_incident))
        .route("/incidents/{id}/signals", post(post_signals))
        .route("/incidents/{id}/advance", post(post_advance))
        .route("/incidents/{id}/stream", get(get_stream))
        .route("/incidents/{id}/records", get(get_records))
        .route("/incidents/{id}/recommendations", get(get_recommendations))
        .route("/incidents/{id}/feedback", post(post_feedback))
        .route("/incidents/{id}/close", post(post_close))
        .route(
            "/memory/kca",
            get(list_kca).post(author_kca).patch(patch_kca_body),
        )
        .route("/memory/kca/{kca_id}", get(get_kca).patch(patch_kca))
        .route("/memory/audit", get(get_audit))
        .route("/memory/episodic", get(list_episodic))
        .route("/memory/playbooks", post(post_playbook))
        .route("/memory/consolidate", post(post_consolidate))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token));
    Router::new()
        .route("/healthz", get(healthz))
        .merge(api)
        .fallback(|| async { ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such route") })
        .with_state(state)
}

async fn require_token(State(state): State<AppState>, req: Request, next: Next) -> Response {
    if let Some(expected) = &state.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .map(str::trim);
        if !presented.is_some_and(|p| constant_time_eq(p.as_bytes(), expected.as_bytes())) {
            return ApiError::new(
                StatusCode::UNAUTHORIZED,
                "unauthorized",
                "missing or invalid bearer token",
            )
            .into_response();
        }
    }
    next.run(req).await
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn healthz(State(state): State<AppState>) -> Json<Value> {
    Json(json!({
        "status": "ok",
        "provider": state.engine.memory().gateway().provider_id(),
        "incidents": state.engine.incidents().len(),
    }))
}

// Incidents.

async fn create_incident(
    State(state): State<AppState>,
    JsonBody(req): JsonBody<CreateIncident>,
) -> ApiResult<impl IntoResponse> {
    let engine = state.engine.clone();
    let handle = blocking(move || engine.create_incident(req)).await?;
    Ok((StatusCode::CREATED, Json(handle)))
}

async fn list_incidents(State(state): State<AppState>) -> ApiResult<impl IntoResponse> {
    let engine = state.engine.clone();
    Ok(Json(blocking(move || Ok(engine.incidents())).await?))
}

async fn get_incident(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    let engine = state.engine.clone();
    Ok(Json(blocking(move || engine.incident(&id)).await?))
}

/// One signal, or an array of signals applied in order. The incident id
/// may be omitted from each signal.
#[derive(Deserialize)]
#[serde(untagged)]
enum SignalBody {
    Many(Vec<Value>),
    One(Value),
}

fn parse_signal(id: &str, mut v: Value) -> Result<RawSignal, ServiceError> {
    if let Value::Object(map) = &mut v {
        map.entry("incident_id")
            .or_insert_with(|| Value::String(id.to_string()));
    }
    let line = v.to_string();
    crate::perception::parse_signal_line(&line).map_err(ServiceError::from)
}

async fn post_signals(
    State(state): State<AppState>,
    Path(id): Path<String>,
    JsonBody(body): JsonBody<SignalBody>,
) -> ApiResult<impl IntoResponse> {
    let engine = state.engine.clone();
    let (values, single) = match body {
        SignalBody::Many(v) => (v, false),
        SignalBody::One(v) => (vec![v], true),
    };
    let acks = blocking(move || {
        let mut acks = Vec::new();
        for v in values {
            let sig = parse_signal(&id, v)?;
            acks.push(engine.ingest_signal(&id, sig)?);
        }
        Ok(acks)
    })
    .await?;
    let body = if single {
        serde_json::to_value(&acks[0])
    } else {
        serde_json::to_value(&acks)
    }
    .map_err(|e| ApiError::from(ServiceError::Json(e)))?;
    Ok((StatusCode::ACCEPTED, Json(body)))
}

#[derive(Deserialize)]
struct AdvanceBody {
    #[serde(default)]
    ts: Option<DateTime<Utc>>,
}

async fn post_advance(
    State(state): State<AppState>,
    Path(id): Path<String>,
    JsonBody(body): JsonBody<AdvanceBody>,
) -> ApiResult<impl IntoResponse> {
    let engine = state.engine.clone();
    let seq = blocking(move || {
        let ts = body.ts.unwrap_or_else(|| engine.now());
        engine.advance_to(&id, ts)
    })
    .await?;
    Ok(Json(json!({ "seq": seq })))
}

#[derive(Deserialize)]
struct StreamQuery {
    #[serde(default)]
    from_seq: u64,
    /// Keep the connection open for live records. Defaults to true.
    #[serde(default)]
    follow: Option<bool>,
}

/// Newline-delimited JSON, one [`StreamRecord`] per line. With `follow`
/// the response stays open until the incident closes.
async fn get_stream(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<StreamQuery>,
) -> ApiResult<Response> {
    let log = state.engine.stream(&id)?;
    let follow = q.follow.unwrap_or(true);
    let engine = state.engine.clone();
    let rx = log.subscribe();

    struct Cursor {
        seq: u64,
        done: bool,
    }
    let body = stream::unfold(
        (
            Cursor {
                seq: q.from_seq,
                done: false,
            },
            rx,
        ),
        move |(mut cur, mut rx)| {
            let log = log.clone();
            let engine = engine.clone();
            let id = id.clone();
            async move {
                loop {
                    if cur.done {
                        return None;
                    }
                    let batch = log.from_seq(cur.seq);
                    if !batch.is_empty() {
                        cur.seq = batch.last().map_or(cur.seq, |r| r.seq);
                        let mut chunk = String::new();
                        for r in &batch {
                            chunk.push_str(&serde_json::to_string(r).unwrap_or_default());
                            chunk.push('\n');
                        }
                        return Some((Ok::<_, std::io::Error>(chunk), (cur, rx)));
                    }
                    let closed = engine.is_closed(&id).unwrap_or(true);
                    if !follow || (closed && cur.seq >= log.last_seq()) {
                        cur.done = true;
                        continue;
                    }
                    // Wait for the next append; a closed channel ends the stream.
                    if rx.changed().await.is_err() {
                        cur.done = true;
                    }
                }
            }
        },
    );
    Ok(Response::builder()
        .header(header::CONTENT_TYPE, "application/x-ndjson")
        .header(header::CACHE_CONTROL, "no-cache")
        .body(Body::from_stream(body))
        .expect("static response parts"))
}

#[derive(Deserialize)]
struct RecordsQuery {
    #[serde(default)]
    from_seq: u64,
    #[serde(default)]
    limit: Option<usize>,
}

#[derive(Serialize)]
struct RecordsPage {
    records: Vec<StreamRecord>,
    last_seq: u64,
    closed: bool,
}

/// Polling fallback for clients that cannot hold a streaming response.
async fn get_records(
    State(state): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<RecordsQuery>,
) -> ApiResult<impl IntoResponse> {
    let engine = &state.engine;
    let log = engine.stream(&id)?;
    let closed = engine.is_closed(&id)?;
    let mut records = log.from_seq(q.from_seq);
    if let Some(limit) = q.limit {
        records.truncate(limit);
    }
    Ok(Json(RecordsPage {
        records,
        last_seq: log.last_seq(),
        closed,
    }))
}

async fn get_recommendations(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    let engine = state.engine.clone();
    Ok(Json(blocking(move || engine.recommendations(&id)).await?))
}

async fn post_feedback(
    State(state): State<AppState>,
    Path(id): Path<String>,
    JsonBody(input): JsonBody<FeedbackInput>,
) -> ApiResult<impl IntoResponse> {
    let engine = state.engine.clone();
    let ack = blocking(move || engine.post_feedback(&id, input)).await?;
    let status = if ack.duplicate {
        StatusCode::OK
    } else {
        StatusCode::CREATED
    };
    Ok((status, Json(ack)))
}

async fn post_close(
    State(state): State<AppState>,
    Path(id): Path<String>,
) -> ApiResult<impl IntoResponse> {
    let engine = state.engine.clone();
    Ok(Json(blocking(move || engine.close_incident(&id)).await?))
}

// Memory administration.

#[derive(Deserialize)]
struct KcaListQuery {
    #[serde(default)]
    active: Option<bool>,
}

async fn list_kca(
    State(state): State<AppState>,
    Query(q): Query<KcaListQuery>,
) -> Json<Vec<Value>> {
    let entries = state.engine.kca_list(q.active.unwrap_or(false));
    Json(entries.iter().map(|e| e.view()).collect())
}

async fn get_kca(
    State(state): State<AppState>,
    Path(kca_id): Path<String>,
) -> ApiResult<Json<Value>> {
    Ok(Json(state.engine.kca_get(&kca_id)?.view()))
}

async fn author_kca(
    State(state): State<AppState>,
    headers: HeaderMap,
    JsonBody(mut body): JsonBody<Value>,
) -> ApiResult<impl IntoResponse> {
    if let Value::Object(map) = &mut body {
        map.insert("op".into(), Value::String("author".into()));
    }
    let op: ReviewOp = serde_json::from_value(body).map_err(|e| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_body",
            e.to_string(),
        )
    })?;
    let engine = state.engine.clone();
    let who = actor(&headers);
    let result = blocking(move || engine.review(op, &who)).await?;
    match result {
        ReviewResult::Entry(e) => Ok((StatusCode::CREATED, Json(e.view()))),
        ReviewResult::Listed(_) => Err(ApiError::new(
            StatusCode::INTERNAL_SERVER_ERROR,
            "internal",
            "unexpected result",
        )),
    }
}

/// Patch body: any subset of the editable fields, or `"active": false` to
/// deactivate.
#[derive(Deserialize)]
struct PatchBody {
    #[serde(default)]
    kca_id: Option<String>,
    #[serde(default)]
    active: Option<bool>,
    #[serde(flatten)]
    patch: KcaPatch,
}

async fn patch_kca(
    State(state): State<AppState>,
    Path(kca_id): Path<String>,
    headers: HeaderMap,
    JsonBody(body): JsonBody<PatchBody>,
) -> ApiResult<Json<Value>> {
    apply_patch(state, kca_id, actor(&headers), body).await
}

async fn patch_kca_body(
    State(state): State<AppState>,
    headers: HeaderMap,
    JsonBody(body): JsonBody<PatchBody>,
) -> ApiResult<Json<Value>> {
    let kca_id = body.kca_id.clone().ok_or_else(|| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_body",
            "kca_id is required",
        )
    })?;
    apply_patch(state, kca_id, actor(&headers), body).await
}

async fn apply_patch(
    state: AppState,
    kca_id: String,
    who: String,
    body: PatchBody,
) -> ApiResult<Json<Value>> {
    let engine = state.engine.clone();
    let entry = blocking(move || {
        let empty = body.patch == KcaPatch::default();
        match body.active {
            Some(true) => Err(ServiceError::Invalid(
                "entries cannot be reactivated; author a new one".into(),
            )),
            Some(false) if empty => engine.deactivate_kca(&kca_id, &who),
            Some(false) => {
                engine.edit_kca(&kca_id, body.patch, &who)?;
                engine.deactivate_kca(&kca_id, &who)
            }
            None if empty => Err(ServiceError::Invalid("patch changes nothing".into())),
            None => engine.edit_kca(&kca_id, body.patch, &who),
        }
    })
    .await?;
    Ok(Json(entry.view()))
}

async fn get_audit(State(state): State<AppState>) -> ApiResult<impl IntoResponse> {
    let engine = state.engine.clone();
    Ok(Json(
        blocking(move || Ok(engine.memory().audit_log())).await?,
    ))
}

async fn list_episodic(State(state): State<AppState>) -> ApiResult<Json<Vec<Value>>> {
    let engine = state.engine.clone();
    let cases = blocking(move || Ok(engine.episodic_cases())).await?;
    let views = cases
        .iter()
        .map(|c| {
            let mut v = serde_json::to_value(c).unwrap_or(Value::Null);
            if let Value::Object(map) = &mut v {
                map.remove("case_embedding");
            }
            v
        })
        .collect();
    Ok(Json(views))
}

async fn post_playbook(
    State(state): State<AppState>,
    JsonBody(doc): JsonBody<PlaybookDoc>,
) -> ApiResult<impl IntoResponse> {
    let engine = state.engine.clone();
    Ok(Json(blocking(move || engine.distill_playbook(&doc)).await?))
}

async fn post_consolidate(State(state): State<AppState>) -> ApiResult<impl IntoResponse> {
    let engine = state.engine.clone();
    Ok(Json(blocking(move || engine.consolidate()).await?))
}

/// Serves `router` on `listener` until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Router,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(shutdown)
        .await
}
