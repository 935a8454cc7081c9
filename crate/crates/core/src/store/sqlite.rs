use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Condvar, Mutex, MutexGuard};

use chrono::{DateTime, TimeZone, Utc};
use rusqlite::{params, Connection, OpenFlags, OptionalExtension, Row};

use super::{
    ExportFilter, NewSession, NewTurn, SessionRecord, StoreError, StoredTurn, TranscriptStore,
    TurnRole,
};

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS sessions (
    session_key    TEXT PRIMARY KEY,
    study_id       TEXT NOT NULL,
    participant_id TEXT NOT NULL,
    condition_id   TEXT NOT NULL,
    created_ms     INTEGER NOT NULL,
    current_phase  TEXT,
    turn_count     INTEGER NOT NULL DEFAULT 0,
    last_turn_ms   INTEGER NOT NULL DEFAULT 0
);
CREATE TABLE IF NOT EXISTS turns (
    session_key   TEXT NOT NULL REFERENCES sessions(session_key),
    seq           INTEGER NOT NULL,
    role          TEXT NOT NULL CHECK (role IN ('user', 'assistant', 'phase_event')),
    content       TEXT NOT NULL,
    active_layers TEXT NOT NULL,
    ts_ms         INTEGER NOT NULL,
    PRIMARY KEY (session_key, seq)
) WITHOUT ROWID;
";

const TURN_COLUMNS: &str = "s.study_id, t.session_key, s.participant_id, s.condition_id, \
                            t.seq, t.role, t.content, t.active_layers, t.ts_ms";
const SESSION_COLUMNS: &str = "session_key, study_id, participant_id, condition_id, \
                               created_ms, current_phase, turn_count";

/// Single-file SQLite store (WAL journal, `synchronous=FULL`). One connection
/// behind a mutex; appends go through a group-commit queue.
pub struct SqliteStore {
    conn: Mutex<Connection>,
    path: Option<PathBuf>,
    writes: GroupCommit,
}

/// Appends waiting for the writer. The caller that finds no commit in flight
/// becomes the leader: it drains the queue and commits the whole batch in one
/// transaction, so one fsync covers every waiting session. The others sleep
/// until their result is posted. Nobody returns before their row is durable.
#[derive(Default)]
struct GroupCommit {
    queue: Mutex<WriteQueue>,
    done: Condvar,
}

type AppendResult = Result<StoredTurn, StoreError>;

#[derive(Default)]
struct WriteQueue {
    pending: Vec<(u64, NewTurn)>,
    results: HashMap<u64, AppendResult>,
    next_ticket: u64,
    committing: bool,
}

/// Clears the leader flag if the batch panics, so followers never hang.
struct LeaderGuard<'a>(&'a GroupCommit);

impl Drop for LeaderGuard<'_> {
    fn drop(&mut self) {
        if let Ok(mut q) = self.0.queue.lock() {
            q.committing = false;
        }
        self.0.done.notify_all();
    }
}

impl std::fmt::Debug for SqliteStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SqliteStore")
            .field("path", &self.path)
            .finish()
    }
}

impl SqliteStore {
    /// Opens or creates the database file.
    pub fn open(path: &Path) -> Result<Self, StoreError> {
        let conn = Connection::open(path)?;
        Self::init(conn, Some(path.to_path_buf()))
    }

    /// Opens a database that must already exist and carry the schema.
    pub fn open_existing(path: &Path) -> Result<Self, StoreError> {
        if !path.is_file() {
            return Err(StoreError::Unavailable(format!(
                "database file {} does not exist",
                path.display()
            )));
        }
        let conn = Connection::open_with_flags(
            path,
            OpenFlags::SQLITE_OPEN_READ_WRITE | OpenFlags::SQLITE_OPEN_NO_MUTEX,
        )?;
        let has_schema: i64 = conn.query_row(
            "SELECT COUNT(*) FROM sqlite_master WHERE type = 'table' AND name IN ('sessions', 'turns')",
            [],
            |r| r.get(0),
        )?;
        if has_schema != 2 {
            return Err(StoreError::Unavailable(format!(
                "{} is not a transcript database",
                path.display()
            )));
        }
        Self::init(conn, Some(path.to_path_buf()))
    }

    pub fn in_memory() -> Result<Self, StoreError> {
        Self::init(Connection::open_in_memory()?, None)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    fn init(conn: Connection, path: Option<PathBuf>) -> Result<Self, StoreError> {
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        if path.is_some() {
            let _mode: String = conn.query_row("PRAGMA journal_mode = WAL", [], |r| r.get(0))?;
        }
        conn.pragma_update(None, "synchronous", "FULL")?;
        conn.pragma_update(None, "foreign_keys", "ON")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Self {
            conn: Mutex::new(conn),
            path,
            writes: GroupCommit::default(),
        })
    }

    fn commit_batch(&self, batch: &[(u64, NewTurn)]) -> Vec<(u64, AppendResult)> {
        let run = || -> Result<Vec<(u64, AppendResult)>, StoreError> {
            let mut conn = self.conn()?;
            let mut tx = conn.transaction()?;
            let mut out = Vec::with_capacity(batch.len());
            for (ticket, turn) in batch {
                // a failed append rolls back alone instead of sinking the batch
                let sp = tx.savepoint()?;
                let result = append_one(&sp, turn);
                if result.is_ok() {
                    sp.commit()?;
                }
                out.push((*ticket, result));
            }
            tx.commit()?;
            Ok(out)
        };
        run().unwrap_or_else(|e| {
            let msg = e.to_string();
            batch
                .iter()
                .map(|(t, _)| (*t, Err(StoreError::Unavailable(msg.clone()))))
                .collect()
        })
    }

    fn conn(&self) -> Result<MutexGuard<'_, Connection>, StoreError> {
        self.conn
            .lock()
            .map_err(|_| StoreError::Unavailable("connection mutex poisoned".into()))
    }
}

fn ms_to_utc(ms: i64) -> Result<DateTime<Utc>, StoreError> {
    Utc.timestamp_millis_opt(ms)
        .single()
        .ok_or_else(|| StoreError::Corrupt(format!("timestamp {ms} out of range")))
}

fn split_layers(joined: &str) -> Vec<String> {
    if joined.is_empty() {
        Vec::new()
    } else {
        joined.split(',').map(str::to_string).collect()
    }
}

fn session_from_row(row: &Row<'_>) -> rusqlite::Result<(SessionRecord, i64)> {
    let created_ms: i64 = row.get(4)?;
    let turn_count: i64 = row.get(6)?;
    Ok((
        SessionRecord {
            session_key: row.get(0)?,
            study_id: row.get(1)?,
            participant_id: row.get(2)?,
            condition_id: row.get(3)?,
            created_at: DateTime::<Utc>::MIN_UTC,
            current_phase: row.get(5)?,
            turn_count: turn_count as u64,
        },
        created_ms,
    ))
}

fn finish_session(
    (mut rec, created_ms): (SessionRecord, i64),
) -> Result<SessionRecord, StoreError> {
    rec.created_at = ms_to_utc(created_ms)?;
    Ok(rec)
}

type RawTurn = (
    String,
    String,
    String,
    String,
    i64,
    String,
    String,
    String,
    i64,
);

fn raw_turn(row: &Row<'_>) -> rusqlite::Result<RawTurn> {
    Ok((
        row.get(0)?,
        row.get(1)?,
        row.get(2)?,
        row.get(3)?,
        row.get(4)?,
        row.get(5)?,
        row.get(6)?,
        row.get(7)?,
        row.get(8)?,
    ))
}

fn finish_turn(raw: RawTurn) -> Result<StoredTurn, StoreError> {
    let (study_id, session_key, participant_id, condition_id, seq, role, content, layers, ts) = raw;
    Ok(StoredTurn {
        study_id,
        session_key,
        participant_id,
        condition_id,
        seq: seq as u64,
        role: role.parse()?,
        content,
        active_layers: split_layers(&layers),
        timestamp: ms_to_utc(ts)?,
    })
}

fn append_one(tx: &Connection, turn: &NewTurn) -> Result<StoredTurn, StoreError> {
    let head: Option<(String, String, String, i64, i64)> = tx
        .prepare_cached(
            "SELECT study_id, participant_id, condition_id, turn_count, last_turn_ms
             FROM sessions WHERE session_key = ?1",
        )?
        .query_row([&turn.session_key], |r| {
            Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?))
        })
        .optional()?;
    let Some((study_id, participant_id, condition_id, turn_count, last_ms)) = head else {
        return Err(StoreError::UnknownSession(turn.session_key.clone()));
    };

    let seq = turn_count + 1;
    // single clock, clamped so timestamps never decrease within a session
    let ts_ms = Utc::now().timestamp_millis().max(last_ms);
    let layers = turn.active_layers.join(",");
    tx.prepare_cached(
        "INSERT INTO turns (session_key, seq, role, content, active_layers, ts_ms)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6)",
    )?
    .execute(params![
        turn.session_key,
        seq,
        turn.role.as_str(),
        turn.content,
        layers,
        ts_ms
    ])?;
    let phase = (turn.role == TurnRole::PhaseEvent).then_some(turn.content.as_str());
    tx.prepare_cached(
        "UPDATE sessions
         SET turn_count = ?2, last_turn_ms = ?3, current_phase = COALESCE(?4, current_phase)
         WHERE session_key = ?1",
    )?
    .execute(params![turn.session_key, seq, ts_ms, phase])?;

    Ok(StoredTurn {
        study_id,
        session_key: turn.session_key.clone(),
        participant_id,
        condition_id,
        seq: seq as u64,
        role: turn.role,
        content: turn.content.clone(),
        active_layers: turn.active_layers.clone(),
        timestamp: ms_to_utc(ts_ms)?,
    })
}

impl TranscriptStore for SqliteStore {
    fn create_or_get_session(&self, new: &NewSession) -> Result<(SessionRecord, bool), StoreError> {
        let key = new.session_key();
        let conn = self.conn()?;
        let inserted = conn.execute(
            "INSERT OR IGNORE INTO sessions (session_key, study_id, participant_id, condition_id, created_ms)
             VALUES (?1, ?2, ?3, ?4, ?5)",
            params![
                key,
                new.study_id,
                new.participant_id,
                new.condition_id,
                Utc::now().timestamp_millis()
            ],
        )?;
        let raw = conn.query_row(
            &format!("SELECT {SESSION_COLUMNS} FROM sessions WHERE session_key = ?1"),
            [&key],
            session_from_row,
        )?;
        Ok((finish_session(raw)?, inserted == 1))
    }

    fn get_session(&self, session_key: &str) -> Result<Option<SessionRecord>, StoreError> {
        let conn = self.conn()?;
        conn.query_row(
            &format!("SELECT {SESSION_COLUMNS} FROM sessions WHERE session_key = ?1"),
            [session_key],
            session_from_row,
        )
        .optional()?
        .map(finish_session)
        .transpose()
    }

    fn append_turn(&self, turn: &NewTurn) -> Result<StoredTurn, StoreError> {
        let poisoned = || StoreError::Unavailable("writer queue poisoned".into());
        let mut q = self.writes.queue.lock().map_err(|_| poisoned())?;
        let ticket = q.next_ticket;
        q.next_ticket += 1;
        q.pending.push((ticket, turn.clone()));
        loop {
            if let Some(result) = q.results.remove(&ticket) {
                return result;
            }
            if q.committing {
                q = self.writes.done.wait(q).map_err(|_| poisoned())?;
                continue;
            }
            q.committing = true;
            let batch = std::mem::take(&mut q.pending);
            drop(q);
            let guard = LeaderGuard(&self.writes);
            let results = self.commit_batch(&batch);
            q = self.writes.queue.lock().map_err(|_| poisoned())?;
            q.results.extend(results);
            q.committing = false;
            std::mem::forget(guard);
            self.writes.done.notify_all();
        }
    }

    fn list_session_turns(&self, session_key: &str) -> Result<Vec<StoredTurn>, StoreError> {
        let conn = self.conn()?;
        let mut stmt = conn.prepare_cached(&format!(
            "SELECT {TURN_COLUMNS} FROM turns t JOIN sessions s ON s.session_key = t.session_key
             WHERE t.session_key = ?1 ORDER BY t.seq"
        ))?;
        let raws = stmt
            .query_map([session_key], raw_turn)?
            .collect::<Result<Vec<_>, _>>()?;
        raws.into_iter().map(finish_turn).collect()
    }

    fn list_sessions(&self, filter: &ExportFilter) -> Result<Vec<SessionRecord>, StoreError> {
        let conn = self.conn()?;
        let mut stmt = conn.prepare_cached(&format!(
            "SELECT {SESSION_COLUMNS} FROM sessions
             WHERE (?1 IS NULL OR condition_id = ?1)
               AND (?2 IS NULL OR created_ms >= ?2)
               AND (?3 IS NULL OR created_ms < ?3)
             ORDER BY session_key"
        ))?;
        let raws = stmt
            .query_map(
                params![
                    filter.condition_id,
                    filter.from.map(|t| t.timestamp_millis()),
                    filter.to.map(|t| t.timestamp_millis())
                ],
                session_from_row,
            )?
            .collect::<Result<Vec<_>, _>>()?;
        raws.into_iter().map(finish_session).collect()
    }

    fn list_turns(&self, filter: &ExportFilter) -> Result<Vec<StoredTurn>, StoreError> {
        let conn = self.conn()?;
        let mut stmt = conn.prepare_cached(&format!(
            "SELECT {TURN_COLUMNS} FROM turns t JOIN sessions s ON s.session_key = t.session_key
             WHERE (?1 IS NULL OR s.condition_id = ?1)
               AND (?2 IS NULL OR t.ts_ms >= ?2)
               AND (?3 IS NULL OR t.ts_ms < ?3)
             ORDER BY t.session_key, t.seq"
        ))?;
        let raws = stmt
            .query_map(
                params![
                    filter.condition_id,
                    filter.from.map(|t| t.timestamp_millis()),
                    filter.to.map(|t| t.timestamp_millis())
                ],
                raw_turn,
            )?
            .collect::<Result<Vec<_>, _>>()?;
        raws.into_iter().map(finish_turn).collect()
    }

    fn check_health(&self) -> Result<(), StoreError> {
        if let Some(path) = &self.path {
            if !path.is_file() {
                return Err(StoreError::Unavailable(format!(
                    "database file {} is missing",
                    path.display()
                )));
            }
        }
        let conn = self.conn()?;
        conn.query_row("SELECT COUNT(*) FROM sessions", [], |r| r.get::<_, i64>(0))?;
        Ok(())
    }
}
