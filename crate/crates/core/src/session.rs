//! Per-participant conversation handling.
//!
//! A session is keyed by `(study_id, participant_id)` and persists across
//! survey pages. The transcript store is the source of truth: every operation
//! that mutates a session first reloads it from the store while holding that
//! session's lock, so handlers may pass stale `Session` values around freely.
//!
//! Phase changes are logged as `phase_event` turns carrying the post-change
//! layer snapshot, which makes the log alone sufficient to reconstruct the
//! system prompt in force at any point.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::Serialize;
use thiserror::Error;
use tokio::sync::OwnedMutexGuard;
use tracing::{debug, info};

use crate::backend::{BackendError, ChatBackend, ChatMessage, LlmRequest};
use crate::config::{is_participant_id, ConfigError, StudyConfig};
use crate::postprocess::PostProcessPipeline;
use crate::prompt::{apply_phase, compose_system_prompt, ordered_layers, LayerSet, PromptError};
use crate::store::{
    session_key, NewSession, NewTurn, SessionRecord, StoreError, StoredTurn, TranscriptStore,
    TurnRole,
};

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("participant id must match [A-Za-z0-9_#-]{{1,64}}")]
    InvalidParticipantId,
    #[error("unknown condition `{0}`")]
    UnknownCondition(String),
    #[error("session was opened with condition `{stored}`, not `{requested}`")]
    ConditionMismatch { stored: String, requested: String },
    #[error("unknown phase `{0}`")]
    UnknownPhase(String),
    #[error("message is empty")]
    EmptyMessage,
    #[error("message is {size} bytes, limit is {limit}")]
    MessageTooLarge { size: usize, limit: usize },
    #[error("session reached its limit of {limit} messages")]
    TurnLimitExceeded { limit: u64 },
    #[error("language model unavailable: {0}")]
    BackendUnavailable(#[source] BackendError),
    #[error(transparent)]
    Storage(#[from] StoreError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Session {
    pub session_key: String,
    pub study_id: String,
    pub participant_id: String,
    pub condition_id: String,
    pub active_layers: LayerSet,
    pub next_seq: u64,
    pub created_at: DateTime<Utc>,
    pub current_phase: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Turn {
    pub seq: u64,
    pub role: TurnRole,
    pub content: String,
    pub timestamp: DateTime<Utc>,
    pub active_layers_snapshot: Vec<String>,
}

impl From<&StoredTurn> for Turn {
    fn from(t: &StoredTurn) -> Self {
        Self {
            seq: t.seq,
            role: t.role,
            content: t.content.clone(),
            timestamp: t.timestamp,
            active_layers_snapshot: t.active_layers.clone(),
        }
    }
}

/// Result of one successful participant message.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exchange {
    pub reply: String,
    pub user_seq: u64,
    pub assistant_seq: u64,
}

/// Called after the participant's turn is durable and before the backend is
/// contacted.
pub type TurnHook = Arc<dyn Fn(&StoredTurn) + Send + Sync>;

pub struct SessionCore {
    config: Arc<StudyConfig>,
    store: Arc<dyn TranscriptStore>,
    backend: Arc<dyn ChatBackend>,
    pipeline: PostProcessPipeline,
    locks: KeyedLocks,
    after_user_append: Option<TurnHook>,
}

impl std::fmt::Debug for SessionCore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SessionCore")
            .field("study_id", &self.config.study_id)
            .field("backend", &self.backend.label())
            .field("pipeline", &self.pipeline)
            .finish()
    }
}

impl SessionCore {
    pub fn new(
        config: Arc<StudyConfig>,
        store: Arc<dyn TranscriptStore>,
        backend: Arc<dyn ChatBackend>,
    ) -> Self {
        let pipeline = PostProcessPipeline::from_config(&config.post_processing);
        Self {
            config,
            store,
            backend,
            pipeline,
            locks: KeyedLocks::default(),
            after_user_append: None,
        }
    }

    pub fn with_pipeline(mut self, pipeline: PostProcessPipeline) -> Self {
        self.pipeline = pipeline;
        self
    }

    pub fn with_after_user_append(mut self, hook: TurnHook) -> Self {
        self.after_user_append = Some(hook);
        self
    }

    pub fn config(&self) -> &StudyConfig {
        &self.config
    }

    pub fn store(&self) -> &Arc<dyn TranscriptStore> {
        &self.store
    }

    pub fn backend_label(&self) -> &'static str {
        self.backend.label()
    }

    /// Opens a new session or resumes the stored one.
    pub fn open_session(
        &self,
        participant_id: &str,
        condition_id: &str,
    ) -> Result<Session, SessionError> {
        if !is_participant_id(participant_id) {
            return Err(SessionError::InvalidParticipantId);
        }
        crate::config::resolve_condition(&self.config, condition_id).map_err(|e| match e {
            ConfigError::UnknownCondition(c) => SessionError::UnknownCondition(c),
            other => unreachable!("resolve_condition only fails with UnknownCondition: {other}"),
        })?;

        let (record, created) = self.store.create_or_get_session(&NewSession {
            study_id: self.config.study_id.clone(),
            participant_id: participant_id.to_string(),
            condition_id: condition_id.to_string(),
        })?;
        if record.condition_id != condition_id {
            return Err(SessionError::ConditionMismatch {
                stored: record.condition_id,
                requested: condition_id.to_string(),
            });
        }
        if created {
            info!(session = %record.session_key, condition = %condition_id, "session opened");
        }
        let turns = self.store.list_session_turns(&record.session_key)?;
        self.restore(record, &turns)
    }

    pub fn history(&self, session: &Session) -> Result<Vec<Turn>, SessionError> {
        Ok(self
            .store
            .list_session_turns(&session.session_key)?
            .iter()
            .map(Turn::from)
            .collect())
    }

    /// Applies a phase directive. Re-applying the current phase changes
    /// nothing and logs nothing.
    pub async fn advance_phase(
        &self,
        session: &Session,
        phase_id: &str,
    ) -> Result<Session, SessionError> {
        let directive = self
            .config
            .phase(phase_id)
            .ok_or_else(|| SessionError::UnknownPhase(phase_id.to_string()))?;

        let _guard = self.locks.lock(&session.session_key).await;
        let (current, _) = self.reload(&session.session_key)?;
        if current.current_phase.as_deref() == Some(phase_id) {
            return Ok(current);
        }

        let next = apply_phase(&current.active_layers, directive);
        let snapshot = ordered_layers(&self.config, &next)?;
        let stored = self.store.append_turn(&NewTurn {
            session_key: current.session_key.clone(),
            role: TurnRole::PhaseEvent,
            content: phase_id.to_string(),
            active_layers: snapshot,
        })?;
        info!(session = %current.session_key, phase = %phase_id, seq = stored.seq, "phase applied");

        Ok(Session {
            active_layers: next,
            current_phase: Some(phase_id.to_string()),
            next_seq: stored.seq + 1,
            ..current
        })
    }

    /// Builds the full stateless request for `pending_user_message` from the
    /// stored conversation.
    pub fn build_llm_request(
        &self,
        session: &Session,
        pending_user_message: &str,
    ) -> Result<LlmRequest, SessionError> {
        self.check_message(pending_user_message)?;
        let turns = self.store.list_session_turns(&session.session_key)?;
        self.request_from_turns(session, &turns, pending_user_message)
    }

    /// Logs the participant's message, asks the backend, post-processes and
    /// logs the reply. If the backend fails the participant's turn stays
    /// logged.
    pub async fn handle_user_message(
        &self,
        session: &Session,
        text: &str,
    ) -> Result<Exchange, SessionError> {
        self.check_message(text)?;

        let _guard = self.locks.lock(&session.session_key).await;
        let (current, turns) = self.reload(&session.session_key)?;

        let limit = self.config.limits.max_turns;
        let sent = turns.iter().filter(|t| t.role == TurnRole::User).count() as u64;
        if sent >= limit {
            return Err(SessionError::TurnLimitExceeded { limit });
        }

        let request = self.request_from_turns(&current, &turns, text)?;
        let snapshot = ordered_layers(&self.config, &current.active_layers)?;

        let user_turn = self.store.append_turn(&NewTurn {
            session_key: current.session_key.clone(),
            role: TurnRole::User,
            content: text.to_string(),
            active_layers: snapshot.clone(),
        })?;
        if let Some(hook) = &self.after_user_append {
            hook(&user_turn);
        }

        let response = self
            .backend
            .complete(&request)
            .await
            .map_err(SessionError::BackendUnavailable)?;
        debug!(
            session = %current.session_key,
            latency_ms = response.latency.as_millis() as u64,
            finish = ?response.finish_reason,
            "backend replied"
        );
        let reply = self.pipeline.run(&response, &current);

        let assistant_turn = self.store.append_turn(&NewTurn {
            session_key: current.session_key.clone(),
            role: TurnRole::Assistant,
            content: reply.clone(),
            active_layers: snapshot,
        })?;

        Ok(Exchange {
            reply,
            user_seq: user_turn.seq,
            assistant_seq: assistant_turn.seq,
        })
    }

    fn check_message(&self, text: &str) -> Result<(), SessionError> {
        if text.trim().is_empty() {
            return Err(SessionError::EmptyMessage);
        }
        let limit = self.config.limits.max_user_message_bytes;
        if text.len() > limit {
            return Err(SessionError::MessageTooLarge {
                size: text.len(),
                limit,
            });
        }
        Ok(())
    }

    fn reload(&self, key: &str) -> Result<(Session, Vec<StoredTurn>), SessionError> {
        let record = self
            .store
            .get_session(key)?
            .ok_or_else(|| StoreError::UnknownSession(key.to_string()))?;
        let turns = self.store.list_session_turns(key)?;
        let session = self.restore(record, &turns)?;
        Ok((session, turns))
    }

    /// Rebuilds live state from the log: the latest phase event's snapshot,
    /// or the condition's base layers when no phase has been applied.
    fn restore(
        &self,
        record: SessionRecord,
        turns: &[StoredTurn],
    ) -> Result<Session, SessionError> {
        let active_layers = match turns.iter().rev().find(|t| t.role == TurnRole::PhaseEvent) {
            Some(ev) => ev.active_layers.iter().cloned().collect(),
            None => self
                .config
                .condition(&record.condition_id)
                .ok_or_else(|| SessionError::UnknownCondition(record.condition_id.clone()))?
                .base_prompt_layers
                .iter()
                .cloned()
                .collect(),
        };
        debug_assert_eq!(
            record.session_key,
            session_key(&record.study_id, &record.participant_id)
        );
        Ok(Session {
            session_key: record.session_key,
            study_id: record.study_id,
            participant_id: record.participant_id,
            condition_id: record.condition_id,
            active_layers,
            next_seq: record.turn_count + 1,
            created_at: record.created_at,
            current_phase: record.current_phase,
        })
    }

    fn request_from_turns(
        &self,
        session: &Session,
        turns: &[StoredTurn],
        pending: &str,
    ) -> Result<LlmRequest, SessionError> {
        let system_prompt = compose_system_prompt(&self.config, &session.active_layers)?.text;
        let mut messages: Vec<ChatMessage> = turns
            .iter()
            .filter_map(|t| match t.role {
                TurnRole::User => Some(ChatMessage::user(t.content.clone())),
                TurnRole::Assistant => Some(ChatMessage::assistant(t.content.clone())),
                TurnRole::PhaseEvent => None,
            })
            .collect();
        messages.push(ChatMessage::user(pending));
        truncate_context(&mut messages, self.config.limits.max_context_messages);

        let backend = &self.config.backend;
        Ok(LlmRequest {
            system_prompt,
            messages,
            model_name: backend.model_name.clone(),
            temperature: backend.temperature,
            max_tokens: backend.max_response_tokens,
        })
    }
}

/// Drops the oldest exchanges (a user message plus the assistant replies that
/// follow it) until at most `max` messages remain. The final message is never
/// dropped and the result always starts with a user message.
pub fn truncate_context(messages: &mut Vec<ChatMessage>, max: usize) {
    use crate::backend::ChatRole;
    let max = max.max(1);
    let mut start = 0;
    while messages.len() - start > max {
        start += 1;
        while start < messages.len() - 1 && messages[start].role == ChatRole::Assistant {
            start += 1;
        }
    }
    messages.drain(..start);
}

/// One async mutex per session key. Entries are pruned once no task holds or
/// waits on them.
#[derive(Default)]
struct KeyedLocks {
    inner: Arc<Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>>,
}

struct KeyedGuard {
    guard: Option<OwnedMutexGuard<()>>,
    lock: Arc<tokio::sync::Mutex<()>>,
    map: Arc<Mutex<HashMap<String, Arc<tokio::sync::Mutex<()>>>>>,
    key: String,
}

impl KeyedLocks {
    async fn lock(&self, key: &str) -> KeyedGuard {
        let lock = {
            let mut map = self.inner.lock().unwrap_or_else(|e| e.into_inner());
            Arc::clone(map.entry(key.to_string()).or_default())
        };
        let guard = Arc::clone(&lock).lock_owned().await;
        KeyedGuard {
            guard: Some(guard),
            lock,
            map: Arc::clone(&self.inner),
            key: key.to_string(),
        }
    }
}

impl Drop for KeyedGuard {
    fn drop(&mut self) {
        self.guard.take();
        let mut map = self.map.lock().unwrap_or_else(|e| e.into_inner());
        // the map and this guard hold the only references: nobody is waiting
        if Arc::strong_count(&self.lock) == 2 {
            map.remove(&self.key);
        }
    }
}
