use std::time::{Duration, Instant};

use async_trait::async_trait;
use reqwest::header::{HeaderMap, RETRY_AFTER};
use reqwest::StatusCode;
use serde::Deserialize;
use serde_json::json;
use tracing::{debug, warn};

use super::{BackendError, ChatBackend, FinishReason, LlmRequest, LlmResponse};
use crate::config::{BackendSettings, RetryPolicy};
use crate::secrets::SecretsBundle;

const MAX_RETRY_AFTER: Duration = Duration::from_secs(60);

/// Client for any endpoint speaking the OpenAI chat-completions JSON shape
/// (Azure serverless deployments, vLLM, Ollama, ...).
pub struct OpenAiCompatibleBackend {
    client: reqwest::Client,
    endpoint: String,
    api_key: String,
    retry: RetryPolicy,
}

impl std::fmt::Debug for OpenAiCompatibleBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OpenAiCompatibleBackend")
            .field("endpoint", &self.endpoint)
            .field("api_key", &"[redacted]")
            .field("retry", &self.retry)
            .finish()
    }
}

#[derive(Deserialize)]
struct CompletionBody {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    choices: Vec<Choice>,
}

#[derive(Deserialize)]
struct Choice {
    #[serde(default)]
    message: Option<ChoiceMessage>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct ChoiceMessage {
    #[serde(default)]
    content: Option<String>,
}

enum AttemptError {
    Retryable {
        reason: String,
        retry_after: Option<Duration>,
    },
    Fatal(BackendError),
}

impl OpenAiCompatibleBackend {
    pub fn new(settings: &BackendSettings, secrets: &SecretsBundle) -> Result<Self, BackendError> {
        let endpoint = settings
            .endpoint_url
            .clone()
            .ok_or_else(|| BackendError::Misconfigured("endpoint_url is not set".into()))?;
        let client = reqwest::Client::builder()
            .timeout(settings.request_timeout())
            .build()
            .map_err(|e| BackendError::Misconfigured(e.to_string()))?;
        Ok(Self {
            client,
            endpoint,
            api_key: secrets.api_key().to_string(),
            retry: settings.retry.clone(),
        })
    }

    /// Sends one completion, retrying timeouts, connection failures, 429 and
    /// 5xx responses with exponential backoff. Never exceeds
    /// `retry.max_attempts` attempts.
    pub async fn send_chat_completion(
        &self,
        request: &LlmRequest,
    ) -> Result<LlmResponse, BackendError> {
        let body = wire_body(request);
        let max_attempts = self.retry.max_attempts.max(1);
        let mut last_error = String::new();

        for attempt in 1..=max_attempts {
            debug!(
                endpoint = %self.endpoint,
                attempt,
                messages = request.messages.len(),
                "POST chat completion (api-key: [redacted], authorization: [redacted])"
            );
            match self.attempt(&body).await {
                Ok(resp) => return Ok(resp),
                Err(AttemptError::Fatal(e)) => return Err(e),
                Err(AttemptError::Retryable {
                    reason,
                    retry_after,
                }) => {
                    warn!(attempt, max_attempts, %reason, "chat completion attempt failed");
                    last_error = reason;
                    if attempt < max_attempts {
                        let delay = retry_after.unwrap_or_else(|| self.backoff(attempt));
                        tokio::time::sleep(delay).await;
                    }
                }
            }
        }

        Err(BackendError::Unavailable {
            attempts: max_attempts,
            last_error,
        })
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let factor = 1u64 << (attempt - 1).min(16);
        Duration::from_millis(self.retry.backoff_base_ms.saturating_mul(factor))
    }

    async fn attempt(&self, body: &serde_json::Value) -> Result<LlmResponse, AttemptError> {
        let started = Instant::now();
        let resp = self
            .client
            .post(&self.endpoint)
            .header("api-key", &self.api_key)
            .bearer_auth(&self.api_key)
            .json(body)
            .send()
            .await
            .map_err(|e| AttemptError::Retryable {
                reason: describe_transport_error(&e),
                retry_after: None,
            })?;

        let status = resp.status();
        if status == StatusCode::TOO_MANY_REQUESTS {
            return Err(AttemptError::Retryable {
                reason: "HTTP 429".into(),
                retry_after: parse_retry_after(resp.headers()),
            });
        }
        if status.is_server_error() {
            return Err(AttemptError::Retryable {
                reason: format!("HTTP {}", status.as_u16()),
                retry_after: None,
            });
        }
        if !status.is_success() {
            return Err(AttemptError::Fatal(BackendError::Rejected {
                status: status.as_u16(),
            }));
        }

        let bytes = resp.bytes().await.map_err(|e| AttemptError::Retryable {
            reason: describe_transport_error(&e),
            retry_after: None,
        })?;
        let latency = started.elapsed();
        parse_completion(&bytes, latency).map_err(AttemptError::Fatal)
    }
}

fn describe_transport_error(e: &reqwest::Error) -> String {
    if e.is_timeout() {
        "request timed out".into()
    } else if e.is_connect() {
        "connection failed".into()
    } else {
        "transport error".into()
    }
}

fn parse_retry_after(headers: &HeaderMap) -> Option<Duration> {
    let secs: u64 = headers
        .get(RETRY_AFTER)?
        .to_str()
        .ok()?
        .trim()
        .parse()
        .ok()?;
    Some(Duration::from_secs(secs).min(MAX_RETRY_AFTER))
}

/// Chat-completions request body: system message first, then the replayed
/// conversation.
pub(crate) fn wire_body(request: &LlmRequest) -> serde_json::Value {
    let mut messages = Vec::with_capacity(request.messages.len() + 1);
    messages.push(json!({ "role": "system", "content": request.system_prompt }));
    messages.extend(
        request
            .messages
            .iter()
            .map(|m| json!({ "role": m.role.as_str(), "content": m.content })),
    );
    json!({
        "model": request.model_name,
        "messages": messages,
        "temperature": request.temperature,
        "max_tokens": request.max_tokens,
    })
}

fn parse_completion(bytes: &[u8], latency: Duration) -> Result<LlmResponse, BackendError> {
    let body: CompletionBody = serde_json::from_slice(bytes)
        .map_err(|e| BackendError::MalformedResponse(format!("invalid JSON: {e}")))?;
    let choice = body
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| BackendError::MalformedResponse("no choices".into()))?;
    let content = choice.message.and_then(|m| m.content).unwrap_or_default();
    let finish_reason = match choice.finish_reason.as_deref() {
        Some("stop") | None => FinishReason::Stop,
        Some("length") => FinishReason::Length,
        Some("content_filter") => FinishReason::ContentFilter,
        Some(_) => FinishReason::Error,
    };
    if finish_reason == FinishReason::Stop && content.is_empty() {
        return Err(BackendError::MalformedResponse(
            "empty content with finish_reason=stop".into(),
        ));
    }
    Ok(LlmResponse {
        content,
        finish_reason,
        latency,
        provider_raw_id: body.id,
    })
}

#[async_trait]
impl ChatBackend for OpenAiCompatibleBackend {
    async fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, BackendError> {
        self.send_chat_completion(request).await
    }

    fn label(&self) -> &'static str {
        "openai_compatible"
    }
}
