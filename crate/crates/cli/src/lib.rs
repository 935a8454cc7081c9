//! Shared plumbing for the `surveychatd` and `surveychat-sim` binaries.

use std::io::IsTerminal;

use tracing_subscriber::EnvFilter;

/// Logs go to stderr. `RUST_LOG` wins over `default_level`.
pub fn init_logging(default_level: &str) {
    let base = std::env::var("RUST_LOG").unwrap_or_else(|_| default_level.to_string());
    let filter = EnvFilter::try_new(surveychat_server::log_directives(&base))
        .unwrap_or_else(|_| EnvFilter::new(surveychat_server::log_directives("info")));
    tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_ansi(std::io::stderr().is_terminal())
        .with_writer(std::io::stderr)
        .init();
}
