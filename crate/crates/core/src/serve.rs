//! HTTP front end for a [`Defender`].
//!
//! * `POST /v1/defend` takes `{"image_base64": "...", "instruction": "..."}`
//!   (instruction optional) and returns the pipeline result as JSON.
//! * `GET /healthz` answers `ok`.
//! * `GET /metrics` renders the pipeline counters in the Prometheus text
//!   format.

use std::net::SocketAddr;
use std::sync::Arc;

use axum::extract::{DefaultBodyLimit, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};

use crate::clients::ClientError;
use crate::pipeline::{Defender, PipelineError};
use crate::raster::RasterImage;

/// Request bodies larger than this are refused.
pub const MAX_BODY_BYTES: usize = 32 * 1024 * 1024;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DefendRequest {
    pub image_base64: String,
    #[serde(default)]
    pub instruction: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorBody {
    pub error: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stage: Option<String>,
}

fn error(status: StatusCode, msg: impl Into<String>, stage: Option<String>) -> Response {
    (
        status,
        Json(ErrorBody {
            error: msg.into(),
            stage,
        }),
    )
        .into_response()
}

fn pipeline_status(e: &PipelineError) -> StatusCode {
    match e {
        PipelineError::Client {
            source: ClientError::Timeout(_),
            ..
        } => StatusCode::GATEWAY_TIMEOUT,
        PipelineError::Client {
            source: ClientError::Precondition(_),
            ..
        }
        | PipelineError::Transform(_) => StatusCode::UNPROCESSABLE_ENTITY,
        PipelineError::Client { .. } | PipelineError::BatchSize { .. } => StatusCode::BAD_GATEWAY,
        PipelineError::Math { .. } | PipelineError::ConsolidationFailed { .. } => {
            StatusCode::INTERNAL_SERVER_ERROR
        }
    }
}

async fn defend(State(defender): State<Arc<Defender>>, Json(req): Json<DefendRequest>) -> Response {
    let bytes = match base64::engine::general_purpose::STANDARD.decode(req.image_base64.trim()) {
        Ok(b) => b,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("image_base64: {e}"), None),
    };
    let image = match RasterImage::decode(&bytes) {
        Ok(i) => i,
        Err(e) => return error(StatusCode::BAD_REQUEST, format!("image: {e}"), None),
    };
    let instruction = req
        .instruction
        .filter(|s| !s.trim().is_empty())
        .unwrap_or_else(|| defender.config().instruction.clone());
    match defender.defend(&image, &instruction).await {
        Ok(result) => Json(result).into_response(),
        Err(e) => {
            log::warn!("defend failed: {e}");
            error(pipeline_status(&e), e.to_string(), Some(e.stage().to_string()))
        }
    }
}

async fn healthz() -> &'static str {
    "ok\n"
}

async fn metrics(State(defender): State<Arc<Defender>>) -> impl IntoResponse {
    (
        [(header::CONTENT_TYPE, "text/plain; version=0.0.4")],
        defender.metrics().render(),
    )
}

pub fn router(defender: Arc<Defender>) -> Router {
    Router::new()
        .route("/v1/defend", post(defend))
        .route("/healthz", get(healthz))
        .route("/metrics", get(metrics))
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES))
        .with_state(defender)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    defender: Arc<Defender>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(defender))
        .with_graceful_shutdown(shutdown)
        .await
}

/// Binds `addr` and serves until interrupted.
pub async fn serve_until_ctrl_c(addr: SocketAddr, defender: Arc<Defender>) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("listening on {}", listener.local_addr()?);
    serve(listener, defender, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}
