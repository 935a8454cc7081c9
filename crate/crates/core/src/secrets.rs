//! Server-side credentials: the LLM provider key and the admin token that
//! guards the export endpoints.
//!
//! Values are held in memory only. `SecretsBundle` has no `Serialize` impl and
//! its `Debug` output is redacted.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use subtle::ConstantTimeEq;
use thiserror::Error;
use tracing::warn;

pub const ENV_API_KEY: &str = "SURVEYCHAT_API_KEY";
pub const ENV_ADMIN_TOKEN: &str = "SURVEYCHAT_ADMIN_TOKEN";

#[derive(Debug, Error)]
pub enum SecretsError {
    #[error("secrets file not found: {0}")]
    FileMissing(PathBuf),
    #[error("failed to read secrets file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("secrets file is not valid JSON (line {line}, column {column})")]
    Malformed { line: usize, column: usize },
    #[error("secrets file has unexpected field(s); only `api_key` and `admin_token` are allowed")]
    UnexpectedField,
    #[error("missing secret `{0}`")]
    MissingKey(&'static str),
}

#[derive(Clone)]
pub struct SecretsBundle {
    api_key: String,
    admin_token: String,
}

impl fmt::Debug for SecretsBundle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SecretsBundle")
            .field("api_key", &"[redacted]")
            .field("admin_token", &"[redacted]")
            .finish()
    }
}

impl SecretsBundle {
    pub fn new(
        api_key: impl Into<String>,
        admin_token: impl Into<String>,
    ) -> Result<Self, SecretsError> {
        let api_key = api_key.into();
        let admin_token = admin_token.into();
        if api_key.is_empty() {
            return Err(SecretsError::MissingKey("api_key"));
        }
        if admin_token.is_empty() {
            return Err(SecretsError::MissingKey("admin_token"));
        }
        Ok(Self {
            api_key,
            admin_token,
        })
    }

    pub fn api_key(&self) -> &str {
        &self.api_key
    }

    pub fn admin_token(&self) -> &str {
        &self.admin_token
    }

    /// Constant-time comparison against the admin token.
    pub fn admin_token_matches(&self, candidate: &str) -> bool {
        self.admin_token
            .as_bytes()
            .ct_eq(candidate.as_bytes())
            .into()
    }

    /// True if `haystack` contains either secret value.
    pub fn leaks_into(&self, haystack: &str) -> bool {
        haystack.contains(&self.api_key) || haystack.contains(&self.admin_token)
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SecretsFile {
    api_key: Option<String>,
    admin_token: Option<String>,
}

/// Loads the secrets file, applying `SURVEYCHAT_API_KEY` /
/// `SURVEYCHAT_ADMIN_TOKEN` overrides from the process environment.
pub fn load_secrets(path: &Path) -> Result<SecretsBundle, SecretsError> {
    load_secrets_with_env(path, |k| std::env::var(k).ok())
}

pub fn load_secrets_with_env(
    path: &Path,
    env: impl Fn(&str) -> Option<String>,
) -> Result<SecretsBundle, SecretsError> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            SecretsError::FileMissing(path.to_path_buf())
        } else {
            SecretsError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })?;
    warn_if_permissive(path);

    // serde messages can echo values; only positions are surfaced
    let file: SecretsFile = serde_json::from_slice(&bytes).map_err(|e| {
        if e.is_data() {
            SecretsError::UnexpectedField
        } else {
            SecretsError::Malformed {
                line: e.line(),
                column: e.column(),
            }
        }
    })?;

    let pick = |env_name: &str, from_file: Option<String>| {
        env(env_name)
            .filter(|v| !v.is_empty())
            .or(from_file)
            .filter(|v| !v.is_empty())
    };
    let api_key = pick(ENV_API_KEY, file.api_key).ok_or(SecretsError::MissingKey("api_key"))?;
    let admin_token =
        pick(ENV_ADMIN_TOKEN, file.admin_token).ok_or(SecretsError::MissingKey("admin_token"))?;
    SecretsBundle::new(api_key, admin_token)
}

/// Builds a bundle purely from environment variables (container deployments
/// without a secrets file).
pub fn secrets_from_env(
    env: impl Fn(&str) -> Option<String>,
) -> Result<SecretsBundle, SecretsError> {
    let api_key = env(ENV_API_KEY).unwrap_or_default();
    let admin_token = env(ENV_ADMIN_TOKEN).unwrap_or_default();
    SecretsBundle::new(api_key, admin_token)
}

#[cfg(unix)]
fn warn_if_permissive(path: &Path) {
    use std::os::unix::fs::PermissionsExt;
    if let Ok(meta) = std::fs::metadata(path) {
        let mode = meta.permissions().mode() & 0o777;
        if mode & 0o077 != 0 {
            warn!(
                path = %path.display(),
                mode = format_args!("{mode:o}"),
                "secrets file is readable by group or others; restrict it to the owner (chmod 600)"
            );
        }
    }
}

#[cfg(not(unix))]
fn warn_if_permissive(_path: &Path) {}
