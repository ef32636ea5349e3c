//! Stateful intervention sessions over an immutable model bundle, served as
//! HTTP+JSON. Wire types live in [`pcbm::api`].
//!
//! Routes:
//! - `GET /health`
//! - `GET /samples?split=train|val|test` (all samples when `split` is absent)
//! - `GET /samples/{id}/thumbnail`
//! - `POST /sessions` with `{"sample_id": n}`, answering 201
//! - `GET /sessions/{id}`
//! - `POST /sessions/{id}/edits` with a tagged [`pcbm::intervention::Edit`]
//! - `DELETE /sessions/{id}`, answering 204
//!
//! Errors carry `{"error": {"code", "message"}}` with these codes:
//! `unknown_split`, `unknown_sample`, `unknown_session`, `unknown_segment`,
//! `unknown_concept`, `out_of_range`, `invalid_edit`, `invalid_request`,
//! `not_intervenable`, `internal`.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use pcbm::api::{ErrorBody, Health, OpenSession, SampleSummary, SessionView, Thumbnail};
use pcbm::intervention::{payload, Edit, InterventionSession};
use pcbm::pipeline::{ModelBundle, OverrideCode, PipelineError};
use pcbm::synth::{Dataset, Split};
use serde::Deserialize;

#[derive(Debug, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn unknown_session(id: &str) -> Self {
        Self::new(
            StatusCode::NOT_FOUND,
            "unknown_session",
            format!("no session `{id}`"),
        )
    }
}

impl From<PipelineError> for ApiError {
    fn from(e: PipelineError) -> Self {
        match &e {
            PipelineError::Override { code, message } => {
                let status = match code {
                    OverrideCode::UnknownSample => StatusCode::NOT_FOUND,
                    _ => StatusCode::UNPROCESSABLE_ENTITY,
                };
                Self::new(status, code.as_str(), message.clone())
            }
            _ => Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(ErrorBody::new(self.code, self.message))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

struct Entry {
    session: InterventionSession,
    last_used: Instant,
}

/// Shared server state: the bundle and dataset are never mutated.
pub struct AppState {
    bundle: Arc<ModelBundle>,
    data: Arc<Dataset>,
    sessions: Mutex<HashMap<String, Arc<Mutex<Entry>>>>,
    ttl: Duration,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(bundle: ModelBundle, data: Dataset, ttl: Duration) -> Arc<Self> {
        Arc::new(Self {
            bundle: Arc::new(bundle),
            data: Arc::new(data),
            sessions: Mutex::new(HashMap::new()),
            ttl,
            next_id: AtomicU64::new(1),
        })
    }

    pub fn session_count(&self) -> usize {
        self.sessions.lock().expect("session map").len()
    }

    /// Drops sessions idle for longer than the TTL.
    fn evict(&self) {
        let now = Instant::now();
        self.sessions
            .lock()
            .expect("session map")
            .retain(|_, e| match e.try_lock() {
                Ok(e) => now.duration_since(e.last_used) <= self.ttl,
                Err(_) => true,
            });
    }

    fn entry(&self, id: &str) -> ApiResult<Arc<Mutex<Entry>>> {
        self.evict();
        self.sessions
            .lock()
            .expect("session map")
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::unknown_session(id))
    }

    fn view(&self, id: &str, e: &Entry) -> ApiResult<SessionView> {
        let s = &e.session;
        Ok(SessionView {
            session_id: id.to_string(),
            payload: payload(
                &self.bundle,
                &self.data,
                s.sample_id,
                &s.current,
                &s.overrides,
            )?,
            audit: s.audit.clone(),
        })
    }
}

async fn blocking<T: Send + 'static>(
    f: impl FnOnce() -> ApiResult<T> + Send + 'static,
) -> ApiResult<T> {
    tokio::task::spawn_blocking(f)
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Health> {
    st.evict();
    Json(Health {
        variant: st.bundle.variant.name().to_string(),
        samples: st.data.samples.len(),
        sessions: st.session_count(),
    })
}

#[derive(Deserialize)]
struct SampleQuery {
    split: Option<String>,
}

async fn samples(
    State(st): State<Arc<AppState>>,
    Query(q): Query<SampleQuery>,
) -> ApiResult<Json<Vec<SampleSummary>>> {
    let ids: Vec<usize> = match q.split.as_deref() {
        None => (0..st.data.samples.len()).collect(),
        Some(name) => {
            let split = Split::parse(name).ok_or_else(|| {
                ApiError::new(
                    StatusCode::BAD_REQUEST,
                    "unknown_split",
                    format!("unknown split `{name}` (expected train, val or test)"),
                )
            })?;
            st.data.split(split).to_vec()
        }
    };
    let schema = &st.bundle.schema;
    let names = schema.class_names();
    let out = ids
        .into_iter()
        .filter_map(|id| {
            let s = &st.data.samples[id];
            Some(SampleSummary {
                id,
                anatomy: schema.anatomies[s.anatomy].name.clone(),
                label: names[s.label].clone(),
                split: st.data.split_of(id)?,
                thumbnail: format!("/samples/{id}/thumbnail"),
            })
        })
        .collect();
    Ok(Json(out))
}

async fn thumbnail(
    State(st): State<Arc<AppState>>,
    Path(id): Path<usize>,
) -> ApiResult<Json<Thumbnail>> {
    let s = st.data.samples.get(id).ok_or_else(|| {
        ApiError::new(
            StatusCode::NOT_FOUND,
            "unknown_sample",
            format!("unknown sample {id}"),
        )
    })?;
    let plane = st.data.height * st.data.width;
    let bytes: Vec<u8> = s.image.data()[..plane]
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Ok(Json(Thumbnail {
        id,
        height: st.data.height,
        width: st.data.width,
        data: base64::engine::general_purpose::STANDARD.encode(bytes),
    }))
}

async fn open_session(
    State(st): State<Arc<AppState>>,
    body: Result<Json<OpenSession>, JsonRejection>,
) -> ApiResult<(StatusCode, Json<SessionView>)> {
    let Json(req) =
        body.map_err(|e| ApiError::new(StatusCode::BAD_REQUEST, "invalid_request", e.body_text()))?;
    st.evict();
    let view = blocking(move || {
        let session = InterventionSession::open(&st.bundle, &st.data, req.sample_id)?;
        let id = format!("s{:08x}", st.next_id.fetch_add(1, Ordering::Relaxed));
        let entry = Entry {
            session,
            last_used: Instant::now(),
        };
        let view = st.view(&id, &entry)?;
        st.sessions
            .lock()
            .expect("session map")
            .insert(id, Arc::new(Mutex::new(entry)));
        Ok(view)
    })
    .await?;
    Ok((StatusCode::CREATED, Json(view)))
}

async fn get_session(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<Json<SessionView>> {
    let entry = st.entry(&id)?;
    blocking(move || {
        let mut e = entry.lock().expect("session");
        e.last_used = Instant::now();
        st.view(&id, &e)
    })
    .await
    .map(Json)
}

async fn apply_edit(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<Edit>, JsonRejection>,
) -> ApiResult<Json<SessionView>> {
    let Json(edit) = body.map_err(|e| {
        ApiError::new(
            StatusCode::UNPROCESSABLE_ENTITY,
            "invalid_edit",
            e.body_text(),
        )
    })?;
    let entry = st.entry(&id)?;
    blocking(move || {
        // Holding the entry lock serializes edits within one session.
        let mut e = entry.lock().expect("session");
        e.last_used = Instant::now();
        e.session.apply(&st.bundle, &st.data, edit)?;
        st.view(&id, &e)
    })
    .await
    .map(Json)
}

async fn close_session(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> ApiResult<StatusCode> {
    st.evict();
    match st.sessions.lock().expect("session map").remove(&id) {
        Some(_) => Ok(StatusCode::NO_CONTENT),
        None => Err(ApiError::unknown_session(&id)),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/samples", get(samples))
        .route("/samples/{id}/thumbnail", get(thumbnail))
        .route("/sessions", post(open_session))
        .route("/sessions/{id}", get(get_session).delete(close_session))
        .route("/sessions/{id}/edits", post(apply_edit))
        .with_state(state)
}

/// Binds `addr` and serves until the process ends.
pub async fn serve(addr: SocketAddr, state: Arc<AppState>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    tracing::info!(addr = %listener.local_addr()?, "intervention service listening");
    axum::serve(listener, router(state)).await
}
