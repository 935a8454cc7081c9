#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use async_trait::async_trait;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use surveychat_core::backend::{mock_complete, BackendError, ChatBackend, LlmRequest, LlmResponse};
use surveychat_core::{StoredTurn, StudyConfig, TurnRole};

pub fn studies_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../studies")
}

pub fn raw_study(name: &str) -> Value {
    serde_json::from_str(&std::fs::read_to_string(studies_dir().join(name)).unwrap()).unwrap()
}

pub fn study_from(doc: &Value) -> Arc<StudyConfig> {
    Arc::new(StudyConfig::from_json_str(&doc.to_string(), None).unwrap())
}

/// The poem study plus three extra phases for chaining.
pub fn multi_phase_doc() -> Value {
    let mut doc = raw_study("poem_study.json");
    let phases = doc["phases"].as_object_mut().unwrap();
    phases.insert(
        "terse_off".into(),
        json!({"activate": [], "deactivate": ["brevity"]}),
    );
    phases.insert(
        "terse_on".into(),
        json!({"activate": ["brevity"], "deactivate": []}),
    );
    phases.insert(
        "poems_again".into(),
        json!({"activate": ["poem_task"], "deactivate": ["no_poems"]}),
    );
    doc
}

/// Records every request and answers like the mock backend.
#[derive(Default)]
pub struct Recording {
    pub requests: Mutex<Vec<LlmRequest>>,
}

#[async_trait]
impl ChatBackend for Recording {
    async fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, BackendError> {
        self.requests.lock().unwrap().push(request.clone());
        Ok(mock_complete(request))
    }

    fn label(&self) -> &'static str {
        "recording"
    }
}

/// Fails the first `failures` calls, then behaves like the mock.
pub struct Flaky {
    pub failures: usize,
    pub calls: AtomicUsize,
}

impl Flaky {
    pub fn new(failures: usize) -> Self {
        Self {
            failures,
            calls: AtomicUsize::new(0),
        }
    }
}

#[async_trait]
impl ChatBackend for Flaky {
    async fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, BackendError> {
        let n = self.calls.fetch_add(1, Ordering::SeqCst);
        if n < self.failures {
            return Err(BackendError::Unavailable {
                attempts: 3,
                last_error: "stub down".into(),
            });
        }
        Ok(mock_complete(request))
    }

    fn label(&self) -> &'static str {
        "flaky"
    }
}

/// Independent prompt composition straight from the raw study document.
pub fn oracle_prompt(doc: &Value, layers: &[String]) -> String {
    let mut ranked: Vec<(i64, &str)> = layers
        .iter()
        .map(|id| {
            let l = &doc["layers"][id.as_str()];
            (
                l["order_rank"].as_i64().unwrap(),
                l["text"].as_str().unwrap(),
            )
        })
        .collect();
    ranked.sort();
    ranked
        .iter()
        .map(|(_, t)| *t)
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// Keeps the shortest suffix that fits `max` and starts at a user message,
/// falling back to the final message alone.
pub fn oracle_truncate(messages: Vec<Value>, max: usize) -> Vec<Value> {
    let n = messages.len();
    let lo = n.saturating_sub(max.max(1));
    let start = (lo..n)
        .find(|&k| messages[k]["role"] == "user")
        .unwrap_or(n - 1);
    messages[start..].to_vec()
}

/// Rebuilds the request for the user turn at `turns[idx]` using only the
/// stored log and the raw study document. Returns canonical JSON.
pub fn oracle_request(doc: &Value, condition_id: &str, turns: &[StoredTurn], idx: usize) -> String {
    let prior = &turns[..idx];
    let layers: Vec<String> = match prior.iter().rev().find(|t| t.role == TurnRole::PhaseEvent) {
        Some(ev) => ev.active_layers.clone(),
        None => doc["conditions"][condition_id]["base_prompt_layers"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap().to_string())
            .collect(),
    };
    let mut messages: Vec<Value> = prior
        .iter()
        .filter_map(|t| match t.role {
            TurnRole::User => Some(json!({"role": "user", "content": t.content})),
            TurnRole::Assistant => Some(json!({"role": "assistant", "content": t.content})),
            TurnRole::PhaseEvent => None,
        })
        .collect();
    messages.push(json!({"role": "user", "content": turns[idx].content}));
    let max = doc["limits"]["max_context_messages"].as_u64().unwrap() as usize;
    let messages = oracle_truncate(messages, max);
    let backend = &doc["backend"];
    // serde_json's default map is ordered by key, and to_string is compact
    serde_json::to_string(&json!({
        "system_prompt": oracle_prompt(doc, &layers),
        "messages": messages,
        "model_name": backend["model_name"],
        "temperature": backend["temperature"],
        "max_tokens": backend["max_response_tokens"],
    }))
    .unwrap()
}

pub fn oracle_mock_reply(canonical: &str, last_user: &str) -> String {
    let digest = Sha256::digest(canonical.as_bytes());
    format!("MOCK[{}]: {last_user}", hex8(&digest))
}

pub fn hex8(digest: &[u8]) -> String {
    digest[..4].iter().map(|b| format!("{b:02x}")).collect()
}
