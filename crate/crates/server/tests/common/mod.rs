#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use async_trait::async_trait;
use surveychat_core::backend::{BackendError, ChatBackend, LlmRequest, LlmResponse, MockBackend};
use surveychat_core::{load_study_config, SecretsBundle, SessionCore, SqliteStore};
use surveychat_server::{router, AppState, ServerOptions};

pub const API_KEY: &str = "sk-test-51c0ffee";
pub const ADMIN_TOKEN: &str = "adm-test-7e11a";

pub fn study_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../studies/poem_study.json")
}

pub struct Down;

#[async_trait]
impl ChatBackend for Down {
    async fn complete(&self, _: &LlmRequest) -> Result<LlmResponse, BackendError> {
        Err(BackendError::Unavailable {
            attempts: 3,
            last_error: "connection failed".into(),
        })
    }

    fn label(&self) -> &'static str {
        "down"
    }
}

pub struct Server {
    pub base: String,
    pub state: Arc<AppState>,
    pub db: PathBuf,
    pub client: reqwest::Client,
    _dir: tempfile::TempDir,
}

impl Server {
    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    pub fn rows(&self) -> usize {
        self.state
            .core
            .store()
            .list_turns(&Default::default())
            .unwrap()
            .len()
    }
}

pub async fn spawn(options: ServerOptions) -> Server {
    spawn_with(options, Arc::new(MockBackend)).await
}

pub async fn spawn_with(options: ServerOptions, backend: Arc<dyn ChatBackend>) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let db = dir.path().join("chat.db");
    let store = Arc::new(SqliteStore::open(&db).unwrap());
    let config = Arc::new(load_study_config(&study_path()).unwrap());
    let core = SessionCore::new(config, store, backend);
    let secrets = SecretsBundle::new(API_KEY, ADMIN_TOKEN).unwrap();
    let state = AppState::new(core, secrets, options);
    let app = router(state.clone());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    Server {
        base: format!("http://{addr}"),
        state,
        db,
        client: reqwest::Client::new(),
        _dir: dir,
    }
}
