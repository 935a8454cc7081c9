use std::time::Duration;

use async_trait::async_trait;
use sha2::{Digest, Sha256};

use super::{BackendError, ChatBackend, FinishReason, LlmRequest, LlmResponse};

/// First 8 hex digits of SHA-256 over the canonical request JSON.
pub fn mock_hash_prefix(request: &LlmRequest) -> String {
    let digest = Sha256::digest(request.canonical_json().as_bytes());
    digest[..4].iter().map(|b| format!("{b:02x}")).collect()
}

/// Deterministic stand-in for a model: `MOCK[<hash>]: <last user message>`.
///
/// Any difference in the replayed context changes the hash, so replies expose
/// replay mistakes.
pub fn mock_complete(request: &LlmRequest) -> LlmResponse {
    let content = format!(
        "MOCK[{}]: {}",
        mock_hash_prefix(request),
        request.last_user_message().unwrap_or_default()
    );
    LlmResponse {
        content,
        finish_reason: FinishReason::Stop,
        latency: Duration::ZERO,
        provider_raw_id: None,
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockBackend;

#[async_trait]
impl ChatBackend for MockBackend {
    async fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, BackendError> {
        Ok(mock_complete(request))
    }

    fn label(&self) -> &'static str {
        "mock"
    }
}
