use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::Semaphore;
use tracing::{debug, info};

use crate::script::{sentinel, SimScript};
use crate::SimError;

#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Required when the target's backend is anything but the mock.
    pub allow_live: bool,
    pub request_timeout: Duration,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            allow_live: false,
            request_timeout: Duration::from_secs(120),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestKind {
    /// `GET /chat` without a phase.
    Bootstrap,
    /// `GET /chat` re-embed carrying a phase.
    Phase,
    Message,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RequestRecord {
    pub kind: RequestKind,
    /// 0 for the bootstrap; the number of messages answered before a phase
    /// re-embed; the 0-based message index for messages.
    pub turn_index: usize,
    /// 0 when no HTTP response arrived.
    pub status: u16,
    pub latency_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sent: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reply: Option<String>,
    /// Sequence number of the assistant turn.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl RequestRecord {
    pub fn ok(&self) -> bool {
        (200..300).contains(&self.status)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session_index: usize,
    pub participant_id: String,
    pub condition_id: String,
    pub session_key: String,
    pub sentinel: String,
    pub requests: Vec<RequestRecord>,
}

impl SessionReport {
    pub fn messages(&self) -> impl Iterator<Item = &RequestRecord> {
        self.requests
            .iter()
            .filter(|r| r.kind == RequestKind::Message)
    }

    /// Phase events the daemon should have logged: re-applying the current
    /// phase logs nothing.
    pub fn expected_phase_events(&self) -> usize {
        let mut current: Option<&str> = None;
        let mut n = 0;
        for r in self
            .requests
            .iter()
            .filter(|r| r.kind == RequestKind::Phase && r.ok())
        {
            let p = r.phase_id.as_deref();
            if p != current {
                n += 1;
                current = p;
            }
        }
        n
    }

    /// 2 rows per answered message, 1 per unanswered (502) message, plus
    /// phase events.
    pub fn expected_rows(&self) -> usize {
        let messages: usize = self
            .messages()
            .map(|r| match r.status {
                s if (200..300).contains(&s) => 2,
                502 => 1,
                _ => 0,
            })
            .sum();
        messages + self.expected_phase_events()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub target: String,
    pub study_id: String,
    pub backend: String,
    pub concurrency: usize,
    pub script: SimScript,
    pub elapsed_ms: f64,
    pub sessions: Vec<SessionReport>,
}

impl SimReport {
    pub fn requests(&self) -> impl Iterator<Item = &RequestRecord> {
        self.sessions.iter().flat_map(|s| s.requests.iter())
    }

    pub fn successful_messages(&self) -> usize {
        self.sessions
            .iter()
            .flat_map(|s| s.messages())
            .filter(|r| r.ok())
            .count()
    }

    pub fn expected_rows(&self) -> usize {
        self.sessions.iter().map(SessionReport::expected_rows).sum()
    }

    /// Latencies of message calls in milliseconds, sorted.
    pub fn message_latencies(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .sessions
            .iter()
            .flat_map(|s| s.messages())
            .map(|r| r.latency_ms)
            .collect();
        v.sort_by(f64::total_cmp);
        v
    }
}

/// Runs every scripted session against `target` with at most `concurrency`
/// sessions in flight. Sessions are sequential internally.
pub async fn run_simulation(
    script: &SimScript,
    target: &str,
    concurrency: usize,
    options: &RunOptions,
) -> Result<SimReport, SimError> {
    script.validate()?;
    if concurrency == 0 {
        return Err(SimError::ScriptInvalid(
            "concurrency must be at least 1".into(),
        ));
    }
    let target = target.trim_end_matches('/').to_string();
    let client = reqwest::Client::builder()
        .timeout(options.request_timeout)
        .build()
        .map_err(|e| SimError::TargetUnreachable(e.to_string()))?;

    let health: Value = client
        .get(format!("{target}/healthz"))
        .send()
        .await
        .and_then(|r| r.error_for_status())
        .map_err(|e| SimError::TargetUnreachable(e.to_string()))?
        .json()
        .await
        .map_err(|e| SimError::TargetUnreachable(format!("unexpected /healthz body: {e}")))?;
    let study_id = health["study_id"].as_str().unwrap_or_default().to_string();
    let backend = health["backend"].as_str().unwrap_or("unknown").to_string();
    if backend != "mock" && !options.allow_live {
        return Err(SimError::LiveBackendRefused(backend));
    }
    info!(%target, %study_id, %backend, sessions = script.n_sessions, concurrency, "simulation starting");

    let started = Instant::now();
    let limit = Arc::new(Semaphore::new(concurrency));
    let script_arc = Arc::new(script.clone());
    let mut tasks = Vec::with_capacity(script.n_sessions);
    for (i, cond) in script.assignments().into_iter().enumerate() {
        let limit = limit.clone();
        let client = client.clone();
        let target = target.clone();
        let script = script_arc.clone();
        let study_id = study_id.clone();
        tasks.push(tokio::spawn(async move {
            let _permit = limit
                .acquire_owned()
                .await
                .expect("semaphore is never closed");
            run_session(&client, &target, &script, &study_id, i, cond).await
        }));
    }
    let mut sessions = Vec::with_capacity(tasks.len());
    for t in tasks {
        sessions.push(t.await.expect("session task panicked"));
    }

    Ok(SimReport {
        target,
        study_id,
        backend,
        concurrency,
        script: script.clone(),
        elapsed_ms: started.elapsed().as_secs_f64() * 1000.0,
        sessions,
    })
}

async fn run_session(
    client: &reqwest::Client,
    target: &str,
    script: &SimScript,
    study_id: &str,
    index: usize,
    cond: String,
) -> SessionReport {
    let pid = script.participant_id(index);
    let mut requests = Vec::new();
    requests.push(page_load(client, target, &pid, &cond, None, 0).await);
    for p in script.phases_after(0) {
        requests.push(page_load(client, target, &pid, &cond, Some(p), 0).await);
    }
    for t in 0..script.turns_per_session {
        let text = script.message(index, t);
        requests.push(send_message(client, target, &pid, &cond, &text, t).await);
        for p in script.phases_after(t + 1) {
            requests.push(page_load(client, target, &pid, &cond, Some(p), t + 1).await);
        }
    }
    debug!(
        session = index,
        requests = requests.len(),
        "session finished"
    );
    SessionReport {
        session_index: index,
        session_key: format!("{study_id}/{pid}"),
        participant_id: pid,
        condition_id: cond,
        sentinel: sentinel(index),
        requests,
    }
}

fn blank(kind: RequestKind, turn_index: usize) -> RequestRecord {
    RequestRecord {
        kind,
        turn_index,
        status: 0,
        latency_ms: 0.0,
        phase_id: None,
        sent: None,
        reply: None,
        seq: None,
        error: None,
    }
}

async fn page_load(
    client: &reqwest::Client,
    target: &str,
    pid: &str,
    cond: &str,
    phase: Option<&str>,
    turn_index: usize,
) -> RequestRecord {
    let kind = if phase.is_some() {
        RequestKind::Phase
    } else {
        RequestKind::Bootstrap
    };
    let mut rec = blank(kind, turn_index);
    rec.phase_id = phase.map(String::from);
    let mut query = vec![("pid", pid), ("cond", cond)];
    if let Some(p) = phase {
        query.push(("phase", p));
    }
    let started = Instant::now();
    let result = client
        .get(format!("{target}/chat"))
        .query(&query)
        .send()
        .await;
    match result {
        Ok(resp) => {
            rec.status = resp.status().as_u16();
            // drain the body so the timing covers the full page
            if let Err(e) = resp.bytes().await {
                rec.error = Some(e.to_string());
            }
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec.latency_ms = started.elapsed().as_secs_f64() * 1000.0;
    rec
}

async fn send_message(
    client: &reqwest::Client,
    target: &str,
    pid: &str,
    cond: &str,
    text: &str,
    turn_index: usize,
) -> RequestRecord {
    let mut rec = blank(RequestKind::Message, turn_index);
    rec.sent = Some(text.to_string());
    let started = Instant::now();
    let result = client
        .post(format!("{target}/api/message"))
        .json(&json!({ "pid": pid, "cond": cond, "text": text }))
        .send()
        .await;
    match result {
        Ok(resp) => {
            rec.status = resp.status().as_u16();
            match resp.json::<Value>().await {
                Ok(body) if rec.ok() => {
                    rec.reply = body["reply"].as_str().map(String::from);
                    rec.seq = body["seq"].as_u64();
                }
                Ok(body) => rec.error = body["code"].as_str().map(String::from),
                Err(e) => rec.error = Some(e.to_string()),
            }
        }
        Err(e) => rec.error = Some(e.to_string()),
    }
    rec.latency_ms = started.elapsed().as_secs_f64() * 1000.0;
    rec
}
