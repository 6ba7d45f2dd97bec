//! JSON/PNG service over a run directory for the selection UI. All state
//! lives in the run directory.

use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use styletune_core::feedback::{validate_selection, SelectionRecord, Strategy};
use styletune_core::Error;

use crate::run_dir::{valid_pool_id, RunDirectory};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ids: Vec<String>,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>) -> Self {
        Self {
            status: status.as_u16(),
            code: code.into(),
            message: message.into(),
            ids: Vec::new(),
        }
    }

    fn not_found(what: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", what)
    }

    fn internal(e: impl std::fmt::Display) -> Self {
        Self::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

struct AppState {
    run: RunDirectory,
    /// Serializes the check-then-write of selection files.
    selection_lock: Mutex<()>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolSummary {
    pub pool_id: String,
    pub items: usize,
    pub prompts: usize,
    pub has_selection: bool,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionBody {
    pub chosen: Vec<String>,
    #[serde(default)]
    pub annotator: Option<String>,
}

#[derive(Debug, Deserialize)]
struct ReplaceQuery {
    #[serde(default)]
    replace: bool,
}

pub fn router(run: RunDirectory) -> Router {
    let state = Arc::new(AppState {
        run,
        selection_lock: Mutex::new(()),
    });
    Router::new()
        .route("/api/pools", get(list_pools))
        .route("/api/pools/{id}", get(get_pool))
        .route("/api/pools/{id}/selection", post(post_selection))
        .route("/api/images/{file}", get(get_image))
        .route("/api/reference/{file}", get(get_reference))
        .with_state(state)
}

/// Serves until the process is stopped.
pub fn serve(run: RunDirectory, host: &str, port: u16) -> std::io::Result<()> {
    let rt = tokio::runtime::Builder::new_current_thread()
        .enable_all()
        .build()?;
    rt.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port)).await?;
        eprintln!(
            "serving {} on http://{}",
            run.root.display(),
            listener.local_addr()?
        );
        axum::serve(listener, router(run)).await
    })
}

fn known_pool(run: &RunDirectory, id: &str) -> ApiResult<()> {
    if valid_pool_id(id) && run.pool_dir(id).join("manifest.json").exists() {
        Ok(())
    } else {
        Err(ApiError::not_found(format!("unknown pool {id:?}")))
    }
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], bytes).into_response()
}

async fn list_pools(State(s): State<Arc<AppState>>) -> ApiResult<Json<Vec<PoolSummary>>> {
    let mut out = Vec::new();
    for id in s.run.pool_ids().map_err(ApiError::internal)? {
        let pool = s.run.pool(&id).map_err(ApiError::internal)?;
        let mut prompts: Vec<usize> = pool.items.iter().map(|i| i.prompt_id).collect();
        prompts.sort_unstable();
        prompts.dedup();
        out.push(PoolSummary {
            has_selection: s.run.selection(&id).exists(),
            pool_id: id,
            items: pool.items.len(),
            prompts: prompts.len(),
        });
    }
    Ok(Json(out))
}

async fn get_pool(State(s): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    known_pool(&s.run, &id)?;
    let bytes =
        std::fs::read(s.run.pool_dir(&id).join("manifest.json")).map_err(ApiError::internal)?;
    Ok(([(header::CONTENT_TYPE, "application/json")], bytes).into_response())
}

async fn get_image(
    State(s): State<Arc<AppState>>,
    Path(file): Path<String>,
) -> ApiResult<Response> {
    let not_found = || ApiError::not_found(format!("unknown image {file:?}"));
    let item_id = file.strip_suffix(".png").ok_or_else(not_found)?;
    let pool_id = item_id.rsplitn(3, '_').nth(2).ok_or_else(not_found)?;
    known_pool(&s.run, pool_id).map_err(|_| not_found())?;
    let pool = s.run.pool(pool_id).map_err(ApiError::internal)?;
    let item = pool.item(item_id).ok_or_else(not_found)?;
    let bytes = std::fs::read(s.run.pool_dir(pool_id).join(&item.file)).map_err(|_| not_found())?;
    Ok(png(bytes))
}

async fn get_reference(
    State(s): State<Arc<AppState>>,
    Path(file): Path<String>,
) -> ApiResult<Response> {
    let not_found = || ApiError::not_found(format!("no reference image {file:?}"));
    let pool_id = file.strip_suffix(".png").ok_or_else(not_found)?;
    known_pool(&s.run, pool_id).map_err(|_| not_found())?;
    let bytes =
        std::fs::read(s.run.pool_dir(pool_id).join("reference.png")).map_err(|_| not_found())?;
    Ok(png(bytes))
}

async fn post_selection(
    State(s): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<ReplaceQuery>,
    body: Bytes,
) -> ApiResult<(StatusCode, Json<SelectionRecord>)> {
    known_pool(&s.run, &id)?;
    let body: SelectionBody = serde_json::from_slice(&body).map_err(|e| {
        ApiError::new(
            StatusCode::BAD_REQUEST,
            "malformed_body",
            format!("expected {{chosen: [item ids], annotator}}: {e}"),
        )
    })?;
    let pool = s.run.pool(&id).map_err(ApiError::internal)?;
    let timestamp = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let rec = SelectionRecord {
        pool_id: id.clone(),
        strategy: Strategy::Human,
        chosen: body.chosen,
        timestamp,
        annotator: body.annotator,
    };
    validate_selection(&pool, &rec).map_err(|e| match e {
        Error::UnknownIds(ids) => ApiError {
            message: format!("unknown item ids: {}", ids.join(", ")),
            ids,
            ..ApiError::new(StatusCode::BAD_REQUEST, "unknown_ids", "")
        },
        other => ApiError::new(
            StatusCode::BAD_REQUEST,
            "invalid_selection",
            other.to_string(),
        ),
    })?;

    let _guard = s.selection_lock.lock().unwrap_or_else(|p| p.into_inner());
    if s.run.selection(&id).exists() && !q.replace {
        return Err(ApiError::new(
            StatusCode::CONFLICT,
            "selection_exists",
            format!("pool {id} already has a selection; resend with ?replace=true"),
        ));
    }
    s.run.write_selection(&rec).map_err(ApiError::internal)?;
    Ok((StatusCode::CREATED, Json(rec)))
}
