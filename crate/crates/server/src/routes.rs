use std::collections::HashMap;
use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, HeaderValue, StatusCode};
use axum::response::{Html, IntoResponse, Response};
use axum::Json;
use chrono::{DateTime, Utc};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::json;
use surveychat_core::assets::{builtin, content_type_for, static_relative_path};
use surveychat_core::export::export as export_csv;
use surveychat_core::prompt::ordered_layers;
use surveychat_core::{ExportFilter, ExportShape, Session};
use tracing::{debug, warn};

use crate::error::ApiError;
use crate::page::{self, Bootstrap, BootstrapDisplay, BootstrapTurn};
use crate::{truncate_chars, AppState};

type Shared = State<Arc<AppState>>;

fn required<'a>(q: &'a HashMap<String, String>, name: &str) -> Result<&'a str, ApiError> {
    q.get(name)
        .map(String::as_str)
        .filter(|v| !v.is_empty())
        .ok_or_else(|| ApiError::bad_request("invalid_params", format!("missing `{name}`")))
}

/// Opens the session and applies `phase` when present.
async fn bootstrap_session(
    state: &AppState,
    pid: &str,
    cond: &str,
    phase: Option<&str>,
) -> Result<Session, ApiError> {
    let session = state.core.open_session(pid, cond)?;
    match phase {
        Some(p) => Ok(state.core.advance_phase(&session, p).await?),
        None => Ok(session),
    }
}

pub(crate) async fn chat(
    State(state): Shared,
    query: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> Result<Response, ApiError> {
    let Query(q) =
        query.map_err(|_| ApiError::bad_request("invalid_params", "malformed query string"))?;
    let pid = required(&q, "pid")?;
    let cond = required(&q, "cond")?;
    let phase = q.get("phase").map(String::as_str).filter(|p| !p.is_empty());

    let session = bootstrap_session(&state, pid, cond, phase).await?;
    let history = state.core.history(&session)?;
    let config = state.core.config();
    let condition = config
        .condition(&session.condition_id)
        .expect("open_session validated the condition");

    let b = Bootstrap {
        study_id: config.study_id.clone(),
        pid: session.participant_id.clone(),
        cond: session.condition_id.clone(),
        phase: session.current_phase.clone(),
        display: BootstrapDisplay::from(&condition.display),
        max_user_message_bytes: config.limits.max_user_message_bytes,
        history: BootstrapTurn::visible(&history),
        message_url: "/api/message".into(),
    };
    let mut resp = Html(page::render(&b)).into_response();
    let headers = resp.headers_mut();
    headers.insert(header::CACHE_CONTROL, HeaderValue::from_static("no-store"));
    headers.insert(
        header::REFERRER_POLICY,
        HeaderValue::from_static("no-referrer"),
    );
    if let Ok(csp) = HeaderValue::from_str(&frame_ancestors(&state.options.allow_origins)) {
        headers.insert(header::CONTENT_SECURITY_POLICY, csp);
    }
    Ok(resp)
}

fn frame_ancestors(origins: &[String]) -> String {
    let mut sources = vec!["'self'".to_string()];
    sources.extend(origins.iter().cloned());
    format!("frame-ancestors {}", sources.join(" "))
}

fn parse_body<T: DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| {
        // serde's message names the field but never echoes values of string fields
        let what = if e.is_data() {
            e.to_string()
        } else {
            "body is not valid JSON".to_string()
        };
        ApiError::bad_request("invalid_json", what)
    })
}

#[derive(Deserialize)]
struct MessageBody {
    pid: String,
    cond: String,
    text: String,
    #[serde(default)]
    phase: Option<String>,
}

pub(crate) async fn message(
    State(state): Shared,
    body: Bytes,
) -> Result<Json<serde_json::Value>, ApiError> {
    let body: MessageBody = parse_body(&body)?;
    let session = bootstrap_session(&state, &body.pid, &body.cond, body.phase.as_deref()).await?;
    let max = state.options.log_content_max;
    if max > 0 {
        debug!(session = %session.session_key, preview = %truncate_chars(&body.text, max), "message received");
    }
    let ex = state
        .core
        .handle_user_message(&session, &body.text)
        .await
        .map_err(|e| {
            warn!(session = %session.session_key, error = %e, "message failed");
            ApiError::from(e)
        })?;
    Ok(Json(json!({ "reply": ex.reply, "seq": ex.assistant_seq })))
}

#[derive(Deserialize)]
struct AdvanceBody {
    pid: String,
    cond: String,
    phase: String,
}

pub(crate) async fn advance(
    State(state): Shared,
    body: Bytes,
) -> Result<Json<serde_json::Value>, ApiError> {
    let body: AdvanceBody = parse_body(&body)?;
    let session = bootstrap_session(&state, &body.pid, &body.cond, Some(&body.phase)).await?;
    let layers = ordered_layers(state.core.config(), &session.active_layers)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?;
    Ok(Json(json!({
        "current_phase": session.current_phase,
        "active_layers": layers,
    })))
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

fn parse_time(q: &HashMap<String, String>, name: &str) -> Result<Option<DateTime<Utc>>, ApiError> {
    q.get(name)
        .filter(|v| !v.is_empty())
        .map(|v| {
            DateTime::parse_from_rfc3339(v)
                .map(|t| t.with_timezone(&Utc))
                .map_err(|_| {
                    ApiError::bad_request(
                        "invalid_params",
                        format!("`{name}` must be an RFC 3339 timestamp"),
                    )
                })
        })
        .transpose()
}

pub(crate) async fn export(
    State(state): Shared,
    Path(shape): Path<String>,
    headers: HeaderMap,
    query: Result<Query<HashMap<String, String>>, QueryRejection>,
) -> Result<Response, ApiError> {
    let authorized = bearer(&headers).is_some_and(|t| state.secrets.admin_token_matches(t));
    if !authorized {
        return Ok(StatusCode::UNAUTHORIZED.into_response());
    }
    let shape: ExportShape = shape.parse().map_err(ApiError::not_found)?;
    let Query(q) =
        query.map_err(|_| ApiError::bad_request("invalid_params", "malformed query string"))?;
    let filter = ExportFilter {
        condition_id: q.get("condition").filter(|c| !c.is_empty()).cloned(),
        from: parse_time(&q, "from")?,
        to: parse_time(&q, "to")?,
    };
    let bytes = export_csv(state.core.store().as_ref(), shape, &filter).map_err(|e| {
        ApiError::new(
            StatusCode::SERVICE_UNAVAILABLE,
            "storage_unavailable",
            e.to_string(),
        )
    })?;
    let name = match shape {
        ExportShape::Turns => "turns.csv",
        ExportShape::Conversations => "conversations.csv",
    };
    Ok((
        [
            (header::CONTENT_TYPE, "text/csv; charset=utf-8".to_string()),
            (
                header::CONTENT_DISPOSITION,
                format!("attachment; filename=\"{name}\""),
            ),
            (header::CACHE_CONTROL, "no-store".to_string()),
        ],
        bytes,
    )
        .into_response())
}

pub(crate) async fn healthz(State(state): Shared) -> Response {
    let study_id = &state.core.config().study_id;
    match state.core.store().check_health() {
        Ok(()) => Json(json!({
            "status": "ok",
            "study_id": study_id,
            "backend": state.core.backend_label(),
        }))
        .into_response(),
        Err(e) => {
            warn!(error = %e, "health check failed");
            (
                StatusCode::SERVICE_UNAVAILABLE,
                Json(json!({ "status": "unavailable", "study_id": study_id })),
            )
                .into_response()
        }
    }
}

pub(crate) async fn static_asset(
    State(state): Shared,
    Path(path): Path<String>,
) -> Result<Response, ApiError> {
    let full = format!("/static/{path}");
    if let Some(asset) = builtin(&full) {
        return Ok(([(header::CONTENT_TYPE, asset.content_type)], asset.bytes).into_response());
    }
    let rel = static_relative_path(&full).ok_or_else(|| ApiError::not_found("no such asset"))?;
    for dir in state.static_dirs() {
        if let Ok(bytes) = tokio::fs::read(dir.join(rel)).await {
            return Ok(([(header::CONTENT_TYPE, content_type_for(rel))], bytes).into_response());
        }
    }
    Err(ApiError::not_found("no such asset"))
}

pub(crate) async fn not_found() -> ApiError {
    ApiError::not_found("no such route")
}
