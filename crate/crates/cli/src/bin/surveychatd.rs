use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Parser, ValueEnum};
use surveychat_core::backend::{ChatBackend, MockBackend, OpenAiCompatibleBackend};
use surveychat_core::secrets::secrets_from_env;
use surveychat_core::{
    load_secrets, load_study_config, BackendKind, ConfigError, SessionCore, SqliteStore,
};
use surveychat_server::{router, AppState, ServerOptions};
use tracing::{error, info};

/// Test-only fault injection: `abort-after-user-append` kills the process once
/// a participant's turn is durable and before the model is asked.
const FAULT_ENV: &str = "SURVEYCHAT_FAULT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum BackendChoice {
    Mock,
    Live,
}

/// Survey chat middleware daemon.
#[derive(Parser, Debug)]
#[command(name = "surveychatd", version)]
struct Args {
    /// Study definition (JSON).
    #[arg(long, env = "SURVEYCHAT_CONFIG")]
    config: PathBuf,
    /// Secrets file with `api_key` and `admin_token`. Without it both come
    /// from SURVEYCHAT_API_KEY / SURVEYCHAT_ADMIN_TOKEN.
    #[arg(long, env = "SURVEYCHAT_SECRETS")]
    secrets: Option<PathBuf>,
    /// SQLite transcript database; created if missing.
    #[arg(long, env = "SURVEYCHAT_DB", default_value = "surveychat.db")]
    db: PathBuf,
    #[arg(long, env = "SURVEYCHAT_LISTEN", default_value = "127.0.0.1:8080")]
    listen: SocketAddr,
    /// Survey platform origin allowed to frame the chat and call the API.
    #[arg(long = "allow-origin")]
    allow_origin: Vec<String>,
    /// Overrides the backend kind from the study file.
    #[arg(long, value_enum)]
    backend: Option<BackendChoice>,
    /// Extra directory served under /static/ (widget bundle).
    #[arg(long)]
    static_dir: Option<PathBuf>,
    /// Characters of participant text allowed in debug logs.
    #[arg(long, default_value_t = 0)]
    log_content_max: usize,
    /// Validate the study file and exit.
    #[arg(long)]
    check: bool,
}

fn load_config(path: &std::path::Path) -> Result<surveychat_core::StudyConfig> {
    match load_study_config(path) {
        Ok(c) => Ok(c),
        Err(ConfigError::SchemaViolation(violations)) => {
            for v in &violations {
                eprintln!("{}: {} {}", path.display(), v.pointer, v.message);
            }
            bail!("{} violation(s) in {}", violations.len(), path.display())
        }
        Err(e) => Err(e).with_context(|| format!("loading {}", path.display())),
    }
}

#[tokio::main]
async fn main() -> Result<()> {
    surveychat_cli::init_logging("info");
    let args = Args::parse();

    let config = load_config(&args.config)?;
    if args.check {
        println!(
            "{}: ok ({} conditions, {} layers, {} phases)",
            args.config.display(),
            config.conditions.len(),
            config.layers.len(),
            config.phases.len()
        );
        return Ok(());
    }
    let secrets = match &args.secrets {
        Some(p) => {
            load_secrets(p).with_context(|| format!("loading secrets from {}", p.display()))?
        }
        None => secrets_from_env(|k| std::env::var(k).ok())
            .context("reading secrets from the environment")?,
    };

    let live = match args.backend {
        Some(BackendChoice::Live) => true,
        Some(BackendChoice::Mock) => false,
        None => config.backend.kind == BackendKind::OpenaiCompatible,
    };
    let backend: Arc<dyn ChatBackend> = if live {
        if config.backend.kind != BackendKind::OpenaiCompatible {
            bail!("--backend live needs backend.kind = \"openai_compatible\" in the study file");
        }
        Arc::new(OpenAiCompatibleBackend::new(&config.backend, &secrets)?)
    } else {
        Arc::new(MockBackend)
    };

    let store = Arc::new(
        SqliteStore::open(&args.db).with_context(|| format!("opening {}", args.db.display()))?,
    );
    let study_id = config.study_id.clone();
    let mut core = SessionCore::new(Arc::new(config), store, backend);
    if std::env::var(FAULT_ENV).as_deref() == Ok("abort-after-user-append") {
        core = core.with_after_user_append(Arc::new(|turn| {
            error!(
                seq = turn.seq,
                "fault injection: aborting after user append"
            );
            std::process::abort();
        }));
    }

    let options = ServerOptions {
        allow_origins: args.allow_origin,
        log_content_max: args.log_content_max,
        static_dir: args.static_dir,
    };
    let backend_label = core.backend_label();
    let state = AppState::new(core, secrets, options);
    let listener = tokio::net::TcpListener::bind(args.listen)
        .await
        .with_context(|| format!("binding {}", args.listen))?;
    let addr = listener.local_addr()?;
    info!(%study_id, backend = backend_label, db = %args.db.display(), "daemon ready");
    // stdout line for supervisors and tests that bind port 0
    println!("listening on http://{addr}");

    axum::serve(listener, router(state))
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    info!("shut down");
    Ok(())
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {}
        _ = term => {}
    }
}
