use std::path::{Path, PathBuf};
use std::sync::Arc;

use async_trait::async_trait;
use proptest::prelude::*;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use surveychat_core::backend::{BackendError, ChatBackend, LlmRequest, LlmResponse, MockBackend};
use surveychat_core::{load_study_config, ExportShape, SecretsBundle, SessionCore, SqliteStore};
use surveychat_server::{router, AppState, ServerOptions};
use surveychat_sim::{
    export_cli, run_simulation, verify_report, ConditionAssignment, PhaseStep, RequestKind,
    RunOptions, SimError, SimScript, Violation,
};

const ADMIN: &str = "adm-sim-test";

struct Daemon {
    base: String,
    db: PathBuf,
    _dir: tempfile::TempDir,
}

fn study_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../studies/poem_study.json")
}

async fn daemon_with(backend: Arc<dyn ChatBackend>) -> Daemon {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("sim.db");
    let core = SessionCore::new(
        Arc::new(load_study_config(&study_path()).unwrap()),
        Arc::new(SqliteStore::open(&db).unwrap()),
        backend,
    );
    let state = AppState::new(
        core,
        SecretsBundle::new("sk-sim", ADMIN).unwrap(),
        ServerOptions::default(),
    );
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let app = router(state);
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Daemon {
        base,
        db,
        _dir: dir,
    }
}

async fn daemon() -> Daemon {
    daemon_with(Arc::new(MockBackend)).await
}

async fn export_turns(d: &Daemon) -> Vec<u8> {
    reqwest::Client::new()
        .get(format!("{}/api/export/turns", d.base))
        .bearer_auth(ADMIN)
        .send()
        .await
        .unwrap()
        .bytes()
        .await
        .unwrap()
        .to_vec()
}

fn script(n: usize, turns: usize) -> SimScript {
    SimScript {
        n_sessions: n,
        condition_assignment: ConditionAssignment::RoundRobin,
        conditions: vec!["1".into(), "2".into(), "3".into()],
        turns_per_session: turns,
        phase_schedule: vec![],
        message_template: "session {session_index} turn {turn_index} {sentinel}".into(),
        participant_prefix: "sim".into(),
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn ten_sessions_three_turns() {
    let d = daemon().await;
    let report = run_simulation(&script(10, 3), &d.base, 4, &RunOptions::default())
        .await
        .unwrap();
    assert_eq!(report.successful_messages(), 30);
    assert_eq!(report.study_id, "poem_study");
    assert_eq!(report.backend, "mock");
    for s in &report.sessions {
        for (t, m) in s.messages().enumerate() {
            assert_eq!(m.seq, Some(2 * t as u64 + 2));
            assert!(m
                .reply
                .as_deref()
                .unwrap()
                .ends_with(m.sent.as_deref().unwrap()));
        }
    }
    let violations = verify_report(&report, &export_turns(&d).await).unwrap();
    assert_eq!(violations, vec![]);
}

#[tokio::test]
async fn degenerate_script_only_bootstraps() {
    let d = daemon().await;
    let report = run_simulation(&script(1, 0), &d.base, 1, &RunOptions::default())
        .await
        .unwrap();
    let reqs: Vec<_> = report.requests().collect();
    assert_eq!(reqs.len(), 1);
    assert_eq!(
        (reqs[0].kind, reqs[0].status),
        (RequestKind::Bootstrap, 200)
    );
    assert_eq!(
        verify_report(&report, &export_turns(&d).await).unwrap(),
        vec![]
    );
}

/// Canonical request built by hand from the study file and the replies seen.
fn expected_request(layers: &[&str], history: &[(String, String)], pending: &str) -> String {
    let doc: Value = serde_json::from_str(&std::fs::read_to_string(study_path()).unwrap()).unwrap();
    let mut ranked: Vec<(i64, &str)> = layers
        .iter()
        .map(|l| {
            (
                doc["layers"][*l]["order_rank"].as_i64().unwrap(),
                doc["layers"][*l]["text"].as_str().unwrap(),
            )
        })
        .collect();
    ranked.sort();
    let system: Vec<&str> = ranked.into_iter().map(|(_, t)| t).collect();
    let mut messages = Vec::new();
    for (u, a) in history {
        messages.push(json!({"role": "user", "content": u}));
        messages.push(json!({"role": "assistant", "content": a}));
    }
    messages.push(json!({"role": "user", "content": pending}));
    serde_json::to_string(&json!({
        "system_prompt": system.join("\n\n"),
        "messages": messages,
        "model_name": "mock",
        "temperature": 0.7,
        "max_tokens": 512,
    }))
    .unwrap()
}

fn hash8(s: &str) -> String {
    Sha256::digest(s.as_bytes())[..4]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[tokio::test]
async fn phase_after_turn_two_changes_reply_hashes() {
    let d = daemon().await;
    let mut sc = script(2, 4);
    sc.phase_schedule = vec![PhaseStep {
        after_turn: 2,
        phase_id: "post_timer".into(),
    }];
    let report = run_simulation(&sc, &d.base, 2, &RunOptions::default())
        .await
        .unwrap();
    assert_eq!(
        verify_report(&report, &export_turns(&d).await).unwrap(),
        vec![]
    );
    assert_eq!(report.expected_rows(), 2 * (8 + 1));

    let before = ["base_persona", "brevity", "poem_task"];
    let after = ["base_persona", "brevity", "no_poems"];
    for s in &report.sessions {
        let mut history: Vec<(String, String)> = Vec::new();
        for (t, m) in s.messages().enumerate() {
            let sent = m.sent.clone().unwrap();
            let reply = m.reply.clone().unwrap();
            let pre = hash8(&expected_request(&before, &history, &sent));
            let post = hash8(&expected_request(&after, &history, &sent));
            assert_ne!(pre, post);
            let expected = if t < 2 { &pre } else { &post };
            assert_eq!(
                reply,
                format!("MOCK[{expected}]: {sent}"),
                "session {} turn {t}",
                s.session_index
            );
            history.push((sent, reply));
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn deleted_row_and_planted_sentinel_are_caught() {
    let d = daemon().await;
    let report = run_simulation(&script(4, 2), &d.base, 4, &RunOptions::default())
        .await
        .unwrap();
    let csv = String::from_utf8(export_turns(&d).await).unwrap();
    assert_eq!(verify_report(&report, csv.as_bytes()).unwrap(), vec![]);

    // drop the first user row of sim00001
    let mut rdr = csv::Reader::from_reader(csv.as_bytes());
    let header = rdr.headers().unwrap().clone();
    let records: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    let write = |rows: &[csv::StringRecord]| {
        let mut w = csv::Writer::from_writer(vec![]);
        w.write_record(&header).unwrap();
        for r in rows {
            w.write_record(r).unwrap();
        }
        w.into_inner().unwrap()
    };
    let victim = records
        .iter()
        .position(|r| &r[2] == "sim00001" && &r[5] == "user")
        .unwrap();
    let mut fewer = records.clone();
    let removed = fewer.remove(victim);
    let v = verify_report(&report, &write(&fewer)).unwrap();
    let missing: Vec<_> = v
        .iter()
        .filter(|v| matches!(v, Violation::MissingMessage { .. }))
        .collect();
    assert_eq!(
        missing,
        vec![&Violation::MissingMessage {
            session_key: "poem_study/sim00001".into(),
            content: removed[6].to_string(),
        }]
    );

    // plant session 0's sentinel in a reply row of session 2
    let mut planted = records.clone();
    let target = planted
        .iter()
        .position(|r| &r[2] == "sim00002" && &r[5] == "assistant")
        .unwrap();
    let mut fields: Vec<String> = planted[target].iter().map(String::from).collect();
    fields[6] = format!("{} SNTL000000Z", fields[6]);
    planted[target] = csv::StringRecord::from(fields);
    let v = verify_report(&report, &write(&planted)).unwrap();
    assert_eq!(
        v,
        vec![Violation::IsolationBreach {
            sentinel: "SNTL000000Z".into(),
            found_in: "poem_study/sim00002".into(),
            location: "export",
        }]
    );
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn mock_runs_are_deterministic() {
    let mut sc = script(6, 3);
    sc.condition_assignment = ConditionAssignment::Random { seed: 42 };
    sc.phase_schedule = vec![PhaseStep {
        after_turn: 1,
        phase_id: "post_timer".into(),
    }];
    let mut replies = Vec::new();
    for _ in 0..2 {
        let d = daemon().await;
        let r = run_simulation(&sc, &d.base, 3, &RunOptions::default())
            .await
            .unwrap();
        let texts: Vec<(String, Option<String>)> = r
            .sessions
            .iter()
            .flat_map(|s| {
                s.messages()
                    .map(move |m| (s.condition_id.clone(), m.reply.clone()))
            })
            .collect();
        replies.push(texts);
    }
    assert_eq!(replies[0], replies[1]);
}

#[tokio::test]
async fn export_cli_matches_http_export() {
    let d = daemon().await;
    run_simulation(&script(3, 2), &d.base, 2, &RunOptions::default())
        .await
        .unwrap();
    let out = tempfile::tempdir().unwrap();
    let path = out.path().join("turns.csv");
    export_cli(&d.db, ExportShape::Turns, &path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), export_turns(&d).await);
}

#[test]
fn export_cli_edge_cases() {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("empty.db");
    SqliteStore::open(&db).unwrap();
    let out = dir.path().join("conv.csv");
    export_cli(&db, ExportShape::Conversations, &out).unwrap();
    assert_eq!(
        std::fs::read_to_string(&out).unwrap(),
        "study_id,session_key,participant_id,condition_id,created_at,turn_count,transcript\n"
    );
    let err = export_cli(&dir.path().join("nope.db"), ExportShape::Turns, &out).unwrap_err();
    assert!(matches!(err, SimError::DbUnreadable(_)));
}

#[tokio::test]
async fn unreachable_target_and_invalid_script() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let err = run_simulation(
        &script(1, 1),
        &format!("http://127.0.0.1:{port}"),
        1,
        &RunOptions::default(),
    )
    .await
    .unwrap_err();
    assert!(matches!(err, SimError::TargetUnreachable(_)));

    let d = daemon().await;
    let err = run_simulation(&script(0, 1), &d.base, 1, &RunOptions::default())
        .await
        .unwrap_err();
    assert!(matches!(err, SimError::ScriptInvalid(_)));
    let err = run_simulation(&script(1, 1), &d.base, 0, &RunOptions::default())
        .await
        .unwrap_err();
    assert!(matches!(err, SimError::ScriptInvalid(_)));
}

struct PretendLive;

#[async_trait]
impl ChatBackend for PretendLive {
    async fn complete(&self, r: &LlmRequest) -> Result<LlmResponse, BackendError> {
        Ok(surveychat_core::mock_complete(r))
    }

    fn label(&self) -> &'static str {
        "openai_compatible"
    }
}

#[tokio::test]
async fn live_backends_need_opt_in() {
    let d = daemon_with(Arc::new(PretendLive)).await;
    let err = run_simulation(&script(1, 1), &d.base, 1, &RunOptions::default())
        .await
        .unwrap_err();
    assert!(matches!(err, SimError::LiveBackendRefused(ref b) if b == "openai_compatible"));
    let opts = RunOptions {
        allow_live: true,
        ..RunOptions::default()
    };
    let report = run_simulation(&script(1, 1), &d.base, 1, &opts)
        .await
        .unwrap();
    assert_eq!(report.successful_messages(), 1);
}

#[tokio::test]
async fn failed_requests_are_reported() {
    let d = daemon().await;
    let mut sc = script(1, 1);
    sc.phase_schedule = vec![PhaseStep {
        after_turn: 1,
        phase_id: "no_such_phase".into(),
    }];
    let report = run_simulation(&sc, &d.base, 1, &RunOptions::default())
        .await
        .unwrap();
    let v = verify_report(&report, &export_turns(&d).await).unwrap();
    assert_eq!(
        v,
        vec![Violation::RequestFailed {
            session_key: "poem_study/sim00000".into(),
            request: RequestKind::Phase,
            turn_index: 1,
            status: 404,
        }]
    );
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn clean_runs_verify(
        n in 1usize..40,
        turns in 0usize..4,
        conc in 1usize..30,
        phase_at in prop::option::of(0usize..4),
        seed in any::<u64>(),
    ) {
        let rt = tokio::runtime::Builder::new_multi_thread().worker_threads(4).enable_all().build().unwrap();
        let violations = rt.block_on(async {
            let d = daemon().await;
            let mut sc = script(n, turns);
            sc.condition_assignment = ConditionAssignment::Random { seed };
            if let Some(at) = phase_at.filter(|&a| a <= turns) {
                sc.phase_schedule.push(PhaseStep { after_turn: at, phase_id: "post_timer".into() });
            }
            let report = run_simulation(&sc, &d.base, conc, &RunOptions::default()).await.unwrap();
            verify_report(&report, &export_turns(&d).await).unwrap()
        });
        prop_assert_eq!(violations, vec![]);
    }
}

#[test]
fn shipped_example_script_parses() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../studies/sim_script.json");
    let s = SimScript::from_json(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(s.n_sessions, 30);
    assert_eq!(s.participant_id(0), "sim00000");
    assert_eq!(s.phases_after(3).collect::<Vec<_>>(), ["post_timer"]);
    assert!(s.message(7, 2).contains("SNTL000007Z"));
}
