use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use serde_json::json;
use surveychat_core::SessionError;

/// Error body `{code, message}` with the matching status.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub status: StatusCode,
    pub code: &'static str,
    pub message: String,
}

impl ApiError {
    pub fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    pub fn bad_request(code: &'static str, message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, code, message)
    }

    pub fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let (status, code) = match &e {
            SessionError::InvalidParticipantId => (StatusCode::BAD_REQUEST, "invalid_params"),
            SessionError::UnknownCondition(_) => (StatusCode::NOT_FOUND, "unknown_condition"),
            SessionError::ConditionMismatch { .. } => (StatusCode::CONFLICT, "condition_mismatch"),
            SessionError::UnknownPhase(_) => (StatusCode::NOT_FOUND, "unknown_phase"),
            SessionError::EmptyMessage => (StatusCode::BAD_REQUEST, "empty_message"),
            SessionError::MessageTooLarge { .. } => (StatusCode::BAD_REQUEST, "message_too_large"),
            SessionError::TurnLimitExceeded { .. } => (StatusCode::TOO_MANY_REQUESTS, "turn_limit"),
            SessionError::BackendUnavailable(_) => (StatusCode::BAD_GATEWAY, "backend_unavailable"),
            SessionError::Storage(_) => (StatusCode::SERVICE_UNAVAILABLE, "storage_unavailable"),
            SessionError::Prompt(_) => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({ "code": self.code, "message": self.message });
        (self.status, axum::Json(body)).into_response()
    }
}
