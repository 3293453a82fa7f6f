//! JSON-over-HTTP binding of [`SessionManager`].
//!
//! | method | path                    | body                                   |
//! |--------|-------------------------|----------------------------------------|
//! | POST   | `/sessions`             | `{"image": b64 PNG, "reference_mask"?: b64 PNG}` or raw `image/png` |
//! | POST   | `/sessions/{id}/clicks` | `{"row": i, "col": j, "label": "+" \| "-"}` |
//! | POST   | `/sessions/{id}/undo`   | none                                   |
//! | GET    | `/sessions/{id}/mask`   | none; `?format=png` returns the PNG    |
//! | DELETE | `/sessions/{id}`        | none                                   |
//! | GET    | `/healthz`, `/metrics`  | none                                   |
//!
//! Errors come back as `{"error": "..."}` with a 4xx/5xx status.

use std::sync::Arc;
use std::time::UNIX_EPOCH;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use clickseg::data::encode_mask_png;
use clickseg::{Click, Label, Mask};
use serde::{Deserialize, Serialize};

use crate::session::{ClickOutcome, ServiceError, SessionManager};

#[derive(Clone)]
pub struct AppState {
    pub manager: Arc<SessionManager>,
}

enum ApiError {
    BadRequest(String),
    Service(ServiceError),
}

impl From<ServiceError> for ApiError {
    fn from(e: ServiceError) -> Self {
        ApiError::Service(e)
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, msg) = match self {
            ApiError::BadRequest(m) => (StatusCode::BAD_REQUEST, m),
            ApiError::Service(e) => {
                let status = match &e {
                    ServiceError::UnknownSession(_) => StatusCode::NOT_FOUND,
                    ServiceError::BadImage(_) | ServiceError::ClickOutOfBounds { .. } => StatusCode::BAD_REQUEST,
                    ServiceError::TooLarge { .. } => StatusCode::PAYLOAD_TOO_LARGE,
                    ServiceError::NothingToUndo => StatusCode::CONFLICT,
                    ServiceError::Model(_) => StatusCode::INTERNAL_SERVER_ERROR,
                };
                (status, e.to_string())
            }
        };
        (status, Json(serde_json::json!({ "error": msg }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs model work off the async executor.
async fn blocking<T: Send + 'static>(f: impl FnOnce() -> Result<T, ServiceError> + Send + 'static) -> ApiResult<T> {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => r.map_err(ApiError::from),
        Err(e) => Err(ApiError::BadRequest(format!("request aborted: {e}"))),
    }
}

#[derive(Deserialize)]
struct CreateRequest {
    image: String,
    #[serde(default)]
    reference_mask: Option<String>,
}

#[derive(Deserialize)]
struct ClickRequest {
    row: usize,
    col: usize,
    label: Label,
}

#[derive(Serialize)]
struct MaskResponse {
    mask_png: String,
    height: usize,
    width: usize,
    clicks: usize,
    foreground_pixels: usize,
    iou: Option<f64>,
}

#[derive(Serialize)]
struct ExportResponse {
    mask_png: String,
    height: usize,
    width: usize,
    clicks: Vec<Click>,
    created_at_ms: u128,
}

#[derive(Deserialize)]
struct MaskQuery {
    format: Option<String>,
}

fn png_b64(mask: &Mask) -> ApiResult<String> {
    Ok(B64.encode(encode_mask_png(mask).map_err(ServiceError::from)?))
}

fn mask_response(o: ClickOutcome) -> ApiResult<Json<MaskResponse>> {
    Ok(Json(MaskResponse {
        mask_png: png_b64(&o.mask)?,
        height: o.mask.height(),
        width: o.mask.width(),
        clicks: o.clicks,
        foreground_pixels: o.mask.count(),
        iou: o.iou,
    }))
}

fn decode_b64(field: &str, s: &str) -> ApiResult<Vec<u8>> {
    B64.decode(s.trim())
        .map_err(|e| ApiError::BadRequest(format!("`{field}` is not valid base64: {e}")))
}

async fn create(State(app): State<AppState>, headers: HeaderMap, body: Bytes) -> ApiResult<impl IntoResponse> {
    let is_png = headers
        .get(header::CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .is_some_and(|v| v.starts_with("image/png"));
    let (image, reference) = if is_png {
        (body.to_vec(), None)
    } else {
        let req: CreateRequest =
            serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("invalid request body: {e}")))?;
        let reference = match &req.reference_mask {
            Some(r) => Some(decode_b64("reference_mask", r)?),
            None => None,
        };
        (decode_b64("image", &req.image)?, reference)
    };
    let manager = app.manager.clone();
    let info = blocking(move || manager.create_session(&image, reference.as_deref())).await?;
    Ok((StatusCode::CREATED, Json(info)))
}

async fn add_click(
    State(app): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> ApiResult<Json<MaskResponse>> {
    let req: ClickRequest =
        serde_json::from_slice(&body).map_err(|e| ApiError::BadRequest(format!("invalid click: {e}")))?;
    let manager = app.manager.clone();
    let click = Click::new(req.row, req.col, req.label);
    mask_response(blocking(move || manager.add_click(&id, click)).await?)
}

async fn undo(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<Json<MaskResponse>> {
    let manager = app.manager.clone();
    mask_response(blocking(move || manager.undo(&id)).await?)
}

async fn export(
    State(app): State<AppState>,
    Path(id): Path<String>,
    Query(q): Query<MaskQuery>,
) -> ApiResult<Response> {
    let e = app.manager.export(&id)?;
    let png = encode_mask_png(&e.mask).map_err(ServiceError::from)?;
    if q.format.as_deref() == Some("png") {
        return Ok(([(header::CONTENT_TYPE, "image/png")], png).into_response());
    }
    Ok(Json(ExportResponse {
        mask_png: B64.encode(png),
        height: e.mask.height(),
        width: e.mask.width(),
        clicks: e.clicks,
        created_at_ms: e.created_at.duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0),
    })
    .into_response())
}

async fn delete(State(app): State<AppState>, Path(id): Path<String>) -> ApiResult<StatusCode> {
    app.manager.delete(&id)?;
    Ok(StatusCode::NO_CONTENT)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn metrics(State(app): State<AppState>) -> Json<crate::session::ServiceMetrics> {
    Json(app.manager.metrics())
}

pub fn router(manager: Arc<SessionManager>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}", axum::routing::delete(delete))
        .route("/sessions/{id}/clicks", post(add_click))
        .route("/sessions/{id}/undo", post(undo))
        .route("/sessions/{id}/mask", get(export))
        .route("/healthz", get(healthz))
        .route("/metrics", get(metrics))
        .layer(DefaultBodyLimit::max(64 * 1024 * 1024))
        .with_state(AppState { manager })
}
