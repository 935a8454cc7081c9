use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::Serialize;

use crate::run::{RequestKind, SimReport};
use crate::SimError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Violation {
    RequestFailed {
        session_key: String,
        request: RequestKind,
        turn_index: usize,
        status: u16,
    },
    MissingMessage {
        session_key: String,
        content: String,
    },
    DuplicateMessage {
        session_key: String,
        content: String,
        times: usize,
    },
    IsolationBreach {
        sentinel: String,
        found_in: String,
        location: &'static str,
    },
    SeqGap {
        session_key: String,
        expected: u64,
        found: u64,
    },
    RowCountMismatch {
        expected: usize,
        actual: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::RequestFailed {
                session_key,
                request,
                turn_index,
                status,
            } => write!(
                f,
                "{session_key}: {request:?} request at turn {turn_index} got status {status}"
            ),
            Violation::MissingMessage {
                session_key,
                content,
            } => {
                write!(
                    f,
                    "{session_key}: sent message missing from export: {content:?}"
                )
            }
            Violation::DuplicateMessage {
                session_key,
                content,
                times,
            } => write!(
                f,
                "{session_key}: message exported {times} times: {content:?}"
            ),
            Violation::IsolationBreach {
                sentinel,
                found_in,
                location,
            } => write!(f, "{sentinel} leaked into {found_in} ({location})"),
            Violation::SeqGap {
                session_key,
                expected,
                found,
            } => write!(f, "{session_key}: expected seq {expected}, found {found}"),
            Violation::RowCountMismatch { expected, actual } => {
                write!(f, "expected {expected} exported rows, found {actual}")
            }
        }
    }
}

struct Row {
    seq: u64,
    role: String,
    content: String,
}

fn parse_export(csv_bytes: &[u8]) -> Result<HashMap<String, Vec<Row>>, SimError> {
    let mut rdr = csv::Reader::from_reader(csv_bytes);
    let headers = rdr
        .headers()
        .map_err(|e| SimError::BadExport(e.to_string()))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| SimError::BadExport(format!("missing column `{name}`")))
    };
    let (key, seq, role, content) = (
        col("session_key")?,
        col("seq")?,
        col("role")?,
        col("content")?,
    );
    let mut out: HashMap<String, Vec<Row>> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| SimError::BadExport(e.to_string()))?;
        let seq = rec[seq]
            .parse()
            .map_err(|_| SimError::BadExport(format!("bad seq `{}`", &rec[seq])))?;
        out.entry(rec[key].to_string()).or_default().push(Row {
            seq,
            role: rec[role].to_string(),
            content: rec[content].to_string(),
        });
    }
    Ok(out)
}

/// Indices of every well-formed sentinel (`SNTL` + 6 digits + `Z`) in `text`.
fn sentinel_owners(text: &str) -> impl Iterator<Item = usize> + '_ {
    text.match_indices("SNTL").filter_map(move |(i, _)| {
        let tail = text.get(i + 4..i + 11)?;
        let (digits, z) = tail.split_at(6);
        if z != "Z" || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        digits.parse().ok()
    })
}

/// Checks a finished run against the per-turn export taken afterwards.
/// Rows of sessions outside the report are ignored.
pub fn verify_report(
    report: &SimReport,
    exported_turns_csv: &[u8],
) -> Result<Vec<Violation>, SimError> {
    let mut rows = parse_export(exported_turns_csv)?;
    let mut violations = Vec::new();

    for s in &report.sessions {
        for r in s.requests.iter().filter(|r| !r.ok()) {
            violations.push(Violation::RequestFailed {
                session_key: s.session_key.clone(),
                request: r.kind,
                turn_index: r.turn_index,
                status: r.status,
            });
        }
    }

    let mut actual_rows = 0;
    for s in &report.sessions {
        let mut session_rows = rows.remove(&s.session_key).unwrap_or_default();
        session_rows.sort_by_key(|r| r.seq);
        actual_rows += session_rows.len();

        // (a) every message that reached the store is exported exactly once
        let mut sent: BTreeMap<&str, usize> = BTreeMap::new();
        for r in s.messages().filter(|r| r.ok() || r.status == 502) {
            *sent
                .entry(r.sent.as_deref().unwrap_or_default())
                .or_default() += 1;
        }
        let mut logged: BTreeMap<&str, usize> = BTreeMap::new();
        for r in session_rows.iter().filter(|r| r.role == "user") {
            *logged.entry(r.content.as_str()).or_default() += 1;
        }
        for (content, &n) in &sent {
            let got = logged.get(content).copied().unwrap_or(0);
            if got < n {
                violations.push(Violation::MissingMessage {
                    session_key: s.session_key.clone(),
                    content: content.to_string(),
                });
            } else if got > n {
                violations.push(Violation::DuplicateMessage {
                    session_key: s.session_key.clone(),
                    content: content.to_string(),
                    times: got,
                });
            }
        }
        for (content, &got) in &logged {
            if !sent.contains_key(content) {
                violations.push(Violation::DuplicateMessage {
                    session_key: s.session_key.clone(),
                    content: content.to_string(),
                    times: got,
                });
            }
        }

        // (b) no other session's sentinel in this session's replies or rows
        let replies = s
            .messages()
            .filter_map(|r| r.reply.as_deref())
            .map(|t| (t, "reply"));
        let exported = session_rows.iter().map(|r| (r.content.as_str(), "export"));
        for (text, location) in replies.chain(exported) {
            for owner in sentinel_owners(text).filter(|&o| o != s.session_index) {
                violations.push(Violation::IsolationBreach {
                    sentinel: crate::sentinel(owner),
                    found_in: s.session_key.clone(),
                    location,
                });
            }
        }

        // (c) seqs are exactly 1..=n
        for (i, r) in session_rows.iter().enumerate() {
            let expected = i as u64 + 1;
            if r.seq != expected {
                violations.push(Violation::SeqGap {
                    session_key: s.session_key.clone(),
                    expected,
                    found: r.seq,
                });
                break;
            }
        }
    }

    // (d) row count
    let expected = report.expected_rows();
    if expected != actual_rows {
        violations.push(Violation::RowCountMismatch {
            expected,
            actual: actual_rows,
        });
    }
    Ok(violations)
}
