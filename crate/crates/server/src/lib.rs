//! HTTP surface of the survey chat daemon.
//!
//! Routes:
//!
//! | method | path | purpose |
//! |---|---|---|
//! | GET | `/chat?pid&cond[&phase]` | widget shell with bootstrap data and history |
//! | POST | `/api/message` | relay one participant message |
//! | POST | `/api/advance` | apply a phase directive |
//! | GET | `/api/export/turns`, `/api/export/conversations` | admin CSV export |
//! | GET | `/healthz` | liveness and store reachability |
//! | GET | `/static/*` | icons and widget assets |

mod error;
mod page;
mod routes;

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use axum::extract::{DefaultBodyLimit, Request};
use axum::http::{header, HeaderValue, Method};
use axum::middleware::{self, Next};
use axum::response::Response;
use axum::routing::{get, post};
use axum::Router;
use surveychat_core::{SecretsBundle, SessionCore};
use tower_http::cors::{AllowOrigin, CorsLayer};
use tracing::info;

pub use error::ApiError;
pub use page::{script_safe_json, Bootstrap, BootstrapDisplay, BootstrapTurn};

/// Request bodies up to this size are parsed so that oversized messages get a
/// proper validation error instead of a transport-level rejection.
pub const MAX_BODY_BYTES: usize = 16 * 1024 * 1024;

#[derive(Debug, Clone, Default)]
pub struct ServerOptions {
    /// Origins allowed to call the API and to frame `/chat`.
    pub allow_origins: Vec<String>,
    /// Characters of participant text allowed in debug logs. 0 logs none.
    pub log_content_max: usize,
    /// Extra directory served under `/static/` (widget bundle, custom icons).
    pub static_dir: Option<PathBuf>,
}

pub struct AppState {
    pub core: SessionCore,
    pub secrets: SecretsBundle,
    pub options: ServerOptions,
}

impl AppState {
    pub fn new(core: SessionCore, secrets: SecretsBundle, options: ServerOptions) -> Arc<Self> {
        Arc::new(Self {
            core,
            secrets,
            options,
        })
    }

    fn static_dirs(&self) -> impl Iterator<Item = &PathBuf> {
        self.options
            .static_dir
            .iter()
            .chain(self.core.config().assets_dir.iter())
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    let mut app = Router::new()
        .route("/chat", get(routes::chat))
        .route("/api/message", post(routes::message))
        .route("/api/advance", post(routes::advance))
        .route("/api/export/{shape}", get(routes::export))
        .route("/healthz", get(routes::healthz))
        .route("/static/{*path}", get(routes::static_asset))
        .fallback(routes::not_found)
        .layer(DefaultBodyLimit::max(MAX_BODY_BYTES));

    let origins: Vec<HeaderValue> = state
        .options
        .allow_origins
        .iter()
        .filter_map(|o| HeaderValue::from_str(o).ok())
        .collect();
    if !origins.is_empty() {
        app = app.layer(
            CorsLayer::new()
                .allow_origin(AllowOrigin::list(origins))
                .allow_methods([Method::GET, Method::POST, Method::OPTIONS])
                .allow_headers([header::CONTENT_TYPE, header::AUTHORIZATION]),
        );
    }
    app.layer(middleware::from_fn(log_request))
        .with_state(state)
}

/// Method, path without query string, status and latency. Query strings carry
/// participant ids and client addresses are never recorded.
async fn log_request(req: Request, next: Next) -> Response {
    let method = req.method().clone();
    let path = req.uri().path().to_string();
    let started = Instant::now();
    let resp = next.run(req).await;
    info!(
        %method,
        path = %path,
        status = resp.status().as_u16(),
        latency_ms = started.elapsed().as_millis() as u64,
        "request"
    );
    resp
}

/// Log filter directives for the daemon. `axum::serve` reports peer
/// addresses at trace level, so it is always silenced.
pub fn log_directives(base: &str) -> String {
    format!("{base},axum::serve=off")
}

pub(crate) fn truncate_chars(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}
