//! Append-only persistence of sessions and turns.
//!
//! The store assigns sequence numbers and timestamps. Per-session ordering of
//! concurrent writers is the caller's job; the store only promises that each
//! append is atomic and durable when it returns.

mod sqlite;

use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use sqlite::SqliteStore;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("storage failure: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("storage unavailable: {0}")]
    Unavailable(String),
    #[error("corrupt record: {0}")]
    Corrupt(String),
}

/// `study_id + "/" + participant_id`.
pub fn session_key(study_id: &str, participant_id: &str) -> String {
    format!("{study_id}/{participant_id}")
}

/// RFC 3339 with millisecond precision and a `Z` suffix.
pub fn format_timestamp(ts: &DateTime<Utc>) -> String {
    ts.to_rfc3339_opts(SecondsFormat::Millis, true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnRole {
    User,
    Assistant,
    PhaseEvent,
}

impl TurnRole {
    pub fn as_str(self) -> &'static str {
        match self {
            TurnRole::User => "user",
            TurnRole::Assistant => "assistant",
            TurnRole::PhaseEvent => "phase_event",
        }
    }
}

impl fmt::Display for TurnRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TurnRole {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "user" => Ok(TurnRole::User),
            "assistant" => Ok(TurnRole::Assistant),
            "phase_event" => Ok(TurnRole::PhaseEvent),
            other => Err(StoreError::Corrupt(format!("unknown role `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewSession {
    pub study_id: String,
    pub participant_id: String,
    pub condition_id: String,
}

impl NewSession {
    pub fn session_key(&self) -> String {
        session_key(&self.study_id, &self.participant_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SessionRecord {
    pub session_key: String,
    pub study_id: String,
    pub participant_id: String,
    pub condition_id: String,
    pub created_at: DateTime<Utc>,
    pub current_phase: Option<String>,
    pub turn_count: u64,
}

/// A turn as submitted by session handling; seq and timestamp are assigned
/// by the store.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NewTurn {
    pub session_key: String,
    pub role: TurnRole,
    /// Message text, or the phase id for phase events.
    pub content: String,
    /// Active layer ids in rank order.
    pub active_layers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoredTurn {
    pub study_id: String,
    pub session_key: String,
    pub participant_id: String,
    pub condition_id: String,
    pub seq: u64,
    pub role: TurnRole,
    pub content: String,
    pub active_layers: Vec<String>,
    pub timestamp: DateTime<Utc>,
}

impl StoredTurn {
    pub fn active_layers_joined(&self) -> String {
        self.active_layers.join(",")
    }

    pub fn timestamp_utc(&self) -> String {
        format_timestamp(&self.timestamp)
    }
}

/// Export selection. `from` is inclusive, `to` exclusive. Turn exports filter
/// on the turn timestamp, conversation exports on the session's `created_at`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExportFilter {
    pub condition_id: Option<String>,
    pub from: Option<DateTime<Utc>>,
    pub to: Option<DateTime<Utc>>,
}

impl ExportFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn condition(condition_id: impl Into<String>) -> Self {
        Self {
            condition_id: Some(condition_id.into()),
            ..Self::default()
        }
    }
}

pub trait TranscriptStore: Send + Sync {
    /// Creates the session if absent. Returns the stored record and whether
    /// it was created by this call.
    fn create_or_get_session(&self, new: &NewSession) -> Result<(SessionRecord, bool), StoreError>;

    fn get_session(&self, session_key: &str) -> Result<Option<SessionRecord>, StoreError>;

    /// Appends one turn atomically. A `PhaseEvent` also updates the session's
    /// `current_phase` in the same transaction.
    fn append_turn(&self, turn: &NewTurn) -> Result<StoredTurn, StoreError>;

    /// All turns of a session in ascending seq; empty for unknown keys.
    fn list_session_turns(&self, session_key: &str) -> Result<Vec<StoredTurn>, StoreError>;

    /// Sessions matching `filter`, ordered by session key.
    fn list_sessions(&self, filter: &ExportFilter) -> Result<Vec<SessionRecord>, StoreError>;

    /// Turns matching `filter`, ordered by (session key, seq).
    fn list_turns(&self, filter: &ExportFilter) -> Result<Vec<StoredTurn>, StoreError>;

    fn check_health(&self) -> Result<(), StoreError>;
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::TimeZone;

    #[test]
    fn timestamp_format() {
        let ts = Utc.timestamp_millis_opt(1_760_000_000_123).unwrap();
        assert_eq!(format_timestamp(&ts), "2025-10-09T08:53:20.123Z");
        let whole = Utc.timestamp_millis_opt(1_760_000_000_000).unwrap();
        assert_eq!(format_timestamp(&whole), "2025-10-09T08:53:20.000Z");
    }

    #[test]
    fn role_roundtrip() {
        for r in [TurnRole::User, TurnRole::Assistant, TurnRole::PhaseEvent] {
            assert_eq!(r.as_str().parse::<TurnRole>().unwrap(), r);
        }
        assert!("system".parse::<TurnRole>().is_err());
    }

    #[test]
    fn key_derivation() {
        assert_eq!(
            session_key("poem_study", "P_a#4567y"),
            "poem_study/P_a#4567y"
        );
    }
}
