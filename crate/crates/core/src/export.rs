//! Research exports: one row per turn, or one row per conversation.
//!
//! Output is UTF-8 CSV per RFC 4180 with LF row terminators and a header row
//! that is always present.

use crate::store::{
    format_timestamp, ExportFilter, StoreError, StoredTurn, TranscriptStore, TurnRole,
};

pub const PER_TURN_HEADER: [&str; 9] = [
    "study_id",
    "session_key",
    "participant_id",
    "condition_id",
    "seq",
    "role",
    "content",
    "active_layers",
    "timestamp_utc",
];

pub const PER_CONVERSATION_HEADER: [&str; 7] = [
    "study_id",
    "session_key",
    "participant_id",
    "condition_id",
    "created_at",
    "turn_count",
    "transcript",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportShape {
    Turns,
    Conversations,
}

impl std::str::FromStr for ExportShape {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "turns" => Ok(ExportShape::Turns),
            "conversations" => Ok(ExportShape::Conversations),
            other => Err(format!(
                "unknown export shape `{other}` (expected turns|conversations)"
            )),
        }
    }
}

pub fn export(
    store: &dyn TranscriptStore,
    shape: ExportShape,
    filter: &ExportFilter,
) -> Result<Vec<u8>, StoreError> {
    match shape {
        ExportShape::Turns => export_per_turn_csv(store, filter),
        ExportShape::Conversations => export_per_conversation_csv(store, filter),
    }
}

pub fn export_per_turn_csv(
    store: &dyn TranscriptStore,
    filter: &ExportFilter,
) -> Result<Vec<u8>, StoreError> {
    let mut out = Vec::new();
    write_record(&mut out, PER_TURN_HEADER);
    for t in store.list_turns(filter)? {
        let seq = t.seq.to_string();
        let layers = t.active_layers_joined();
        let ts = t.timestamp_utc();
        write_record(
            &mut out,
            [
                t.study_id.as_str(),
                &t.session_key,
                &t.participant_id,
                &t.condition_id,
                &seq,
                t.role.as_str(),
                &t.content,
                &layers,
                &ts,
            ],
        );
    }
    Ok(out)
}

pub fn export_per_conversation_csv(
    store: &dyn TranscriptStore,
    filter: &ExportFilter,
) -> Result<Vec<u8>, StoreError> {
    let mut out = Vec::new();
    write_record(&mut out, PER_CONVERSATION_HEADER);
    for s in store.list_sessions(filter)? {
        let turns = store.list_session_turns(&s.session_key)?;
        let created = format_timestamp(&s.created_at);
        let count = turns.len().to_string();
        let transcript = render_transcript(&turns);
        write_record(
            &mut out,
            [
                s.study_id.as_str(),
                &s.session_key,
                &s.participant_id,
                &s.condition_id,
                &created,
                &count,
                &transcript,
            ],
        );
    }
    Ok(out)
}

/// `[user] hi\n[assistant] yo\n[phase] post_timer`
pub fn render_transcript(turns: &[StoredTurn]) -> String {
    turns
        .iter()
        .map(|t| {
            let tag = match t.role {
                TurnRole::User => "user",
                TurnRole::Assistant => "assistant",
                TurnRole::PhaseEvent => "phase",
            };
            format!("[{tag}] {}", t.content)
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn write_record<'a>(out: &mut Vec<u8>, fields: impl IntoIterator<Item = &'a str>) {
    for (i, field) in fields.into_iter().enumerate() {
        if i > 0 {
            out.push(b',');
        }
        write_field(out, field);
    }
    out.push(b'\n');
}

fn write_field(out: &mut Vec<u8>, field: &str) {
    let needs_quotes = field
        .bytes()
        .any(|b| matches!(b, b',' | b'"' | b'\n' | b'\r'));
    if !needs_quotes {
        out.extend_from_slice(field.as_bytes());
        return;
    }
    out.push(b'"');
    for ch in field.split_inclusive('"') {
        out.extend_from_slice(ch.as_bytes());
        if ch.ends_with('"') {
            out.push(b'"');
        }
    }
    out.push(b'"');
}
