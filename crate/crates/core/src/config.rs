//! Study definition files.
//!
//! A study is described by one JSON document that lives outside the code:
//! conditions, the system-prompt layers each condition starts with, the
//! phase directives that survey pages can trigger, and backend settings.
//! The schema is strict (unknown fields are rejected) and versioned through
//! the top-level `schema_version` field.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assets;

pub const SCHEMA_VERSION: u32 = 1;

/// Maximum length of every identifier accepted from study files or URLs.
pub const MAX_ID_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("study config not found: {0}")]
    FileMissing(PathBuf),
    #[error("failed to read study config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("study config is not valid UTF-8")]
    InvalidEncoding,
    #[error("malformed JSON at line {line}, column {column}: {message}")]
    MalformedJson {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema violation at {}: {}", .0[0].pointer, .0[0].message)]
    SchemaViolation(Vec<Violation>),
    #[error("unknown condition `{0}`")]
    UnknownCondition(String),
}

impl ConfigError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            ConfigError::SchemaViolation(v) => v,
            _ => &[],
        }
    }
}

/// One failed invariant, located by a JSON pointer into the study document.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub pointer: String,
    pub message: String,
}

impl Violation {
    fn new(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.pointer, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub schema_version: u32,
    pub study_id: String,
    pub conditions: BTreeMap<String, ConditionSpec>,
    pub layers: BTreeMap<String, PromptLayer>,
    #[serde(default)]
    pub phases: BTreeMap<String, PhaseDirective>,
    #[serde(default)]
    pub backend: BackendSettings,
    #[serde(default)]
    pub limits: MessageLimits,
    /// Response post-processing stages, applied in order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub post_processing: Vec<PostProcessStage>,
    /// Directory holding researcher-supplied static assets (icons). Relative
    /// paths are resolved against the config file's directory on load.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assets_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    #[serde(skip)]
    pub condition_id: String,
    pub base_prompt_layers: Vec<String>,
    #[serde(default)]
    pub display: DisplaySpec,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisplaySpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icon_ref: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_name: Option<String>,
    #[serde(default)]
    pub self_reference_mode: SelfReferenceMode,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfReferenceMode {
    FirstPerson,
    ThirdPerson,
    #[default]
    None,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptLayer {
    #[serde(skip)]
    pub layer_id: String,
    pub text: String,
    pub order_rank: i64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseDirective {
    #[serde(skip)]
    pub phase_id: String,
    #[serde(default)]
    pub activate: Vec<String>,
    #[serde(default)]
    pub deactivate: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    OpenaiCompatible,
    #[default]
    Mock,
}

impl BackendKind {
    pub fn as_str(self) -> &'static str {
        match self {
            BackendKind::OpenaiCompatible => "openai_compatible",
            BackendKind::Mock => "mock",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendSettings {
    pub kind: BackendKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub endpoint_url: Option<String>,
    pub model_name: String,
    pub temperature: f64,
    pub max_response_tokens: u32,
    pub request_timeout_ms: u64,
    pub retry: RetryPolicy,
}

impl Default for BackendSettings {
    fn default() -> Self {
        Self {
            kind: BackendKind::Mock,
            endpoint_url: None,
            model_name: "mock".to_string(),
            temperature: 0.7,
            max_response_tokens: 512,
            request_timeout_ms: 30_000,
            retry: RetryPolicy::default(),
        }
    }
}

impl BackendSettings {
    pub fn request_timeout(&self) -> std::time::Duration {
        std::time::Duration::from_millis(self.request_timeout_ms)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Total attempts including the first one.
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        // one initial attempt plus two retries
        Self {
            max_attempts: 3,
            backoff_base_ms: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MessageLimits {
    pub max_user_message_bytes: usize,
    /// Maximum number of participant messages per session.
    pub max_turns: u64,
    /// Upper bound on user/assistant messages replayed to the backend.
    pub max_context_messages: usize,
}

impl Default for MessageLimits {
    fn default() -> Self {
        Self {
            max_user_message_bytes: 8 * 1024,
            max_turns: 100,
            max_context_messages: 200,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostProcessStage {
    Identity,
    StripTrailingWhitespace,
}

/// `[A-Za-z0-9_-]{1,64}`
pub fn is_url_safe_token(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= MAX_ID_LEN
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

/// `[A-Za-z0-9_#-]{1,64}`; survey platforms emit ids such as `P_a#4567y`.
pub fn is_participant_id(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= MAX_ID_LEN
        && s.bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-' || b == b'#')
}

fn escape_pointer_token(token: &str) -> String {
    token.replace('~', "~0").replace('/', "~1")
}

fn pointer(parts: &[&str]) -> String {
    let mut out = String::new();
    for p in parts {
        out.push('/');
        out.push_str(&escape_pointer_token(p));
    }
    out
}

impl StudyConfig {
    pub fn condition(&self, condition_id: &str) -> Option<&ConditionSpec> {
        self.conditions.get(condition_id)
    }

    pub fn layer(&self, layer_id: &str) -> Option<&PromptLayer> {
        self.layers.get(layer_id)
    }

    pub fn phase(&self, phase_id: &str) -> Option<&PhaseDirective> {
        self.phases.get(phase_id)
    }

    /// Serializes back to the on-disk JSON form.
    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("study config is always serializable")
    }

    /// Parses a study document from a string. Relative `assets_dir` values are
    /// resolved against `base_dir` when given.
    pub fn from_json_str(text: &str, base_dir: Option<&Path>) -> Result<Self, ConfigError> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| ConfigError::MalformedJson {
                line: e.line(),
                column: e.column(),
                message: e.to_string(),
            })?;

        let mut config: StudyConfig = serde_path_to_error::deserialize(value).map_err(|e| {
            let ptr = path_to_pointer(e.path());
            ConfigError::SchemaViolation(vec![Violation::new(ptr, e.inner().to_string())])
        })?;

        config.fill_ids();
        if let (Some(dir), Some(base)) = (config.assets_dir.as_mut(), base_dir) {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }

        let violations = validate_config(&config);
        if violations.is_empty() {
            Ok(config)
        } else {
            Err(ConfigError::SchemaViolation(violations))
        }
    }

    fn fill_ids(&mut self) {
        for (id, c) in self.conditions.iter_mut() {
            c.condition_id = id.clone();
        }
        for (id, l) in self.layers.iter_mut() {
            l.layer_id = id.clone();
        }
        for (id, p) in self.phases.iter_mut() {
            p.phase_id = id.clone();
        }
    }
}

fn path_to_pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut out = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => {
                out.push('/');
                out.push_str(&index.to_string());
            }
            Segment::Map { key } => {
                out.push('/');
                out.push_str(&escape_pointer_token(key));
            }
            Segment::Enum { variant } => {
                out.push('/');
                out.push_str(&escape_pointer_token(variant));
            }
            Segment::Unknown => {}
        }
    }
    if out.is_empty() {
        "/".to_string()
    } else {
        out
    }
}

pub fn load_study_config(path: &Path) -> Result<StudyConfig, ConfigError> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            ConfigError::FileMissing(path.to_path_buf())
        } else {
            ConfigError::Io {
                path: path.to_path_buf(),
                source: e,
            }
        }
    })?;
    let text = String::from_utf8(bytes).map_err(|_| ConfigError::InvalidEncoding)?;
    StudyConfig::from_json_str(&text, path.parent())
}

pub fn resolve_condition<'a>(
    config: &'a StudyConfig,
    condition_id: &str,
) -> Result<&'a ConditionSpec, ConfigError> {
    config
        .condition(condition_id)
        .ok_or_else(|| ConfigError::UnknownCondition(condition_id.to_string()))
}

/// Checks every invariant of a parsed study. Returns an empty list iff the
/// study is usable.
pub fn validate_config(config: &StudyConfig) -> Vec<Violation> {
    let mut out = Vec::new();

    if config.schema_version != SCHEMA_VERSION {
        out.push(Violation::new(
            "/schema_version",
            format!(
                "unsupported schema_version {}, expected {SCHEMA_VERSION}",
                config.schema_version
            ),
        ));
    }
    if !is_url_safe_token(&config.study_id) {
        out.push(Violation::new(
            "/study_id",
            "study_id must match [A-Za-z0-9_-]{1,64}",
        ));
    }

    for (id, layer) in &config.layers {
        if !is_url_safe_token(id) {
            out.push(Violation::new(
                pointer(&["layers", id]),
                "layer id must match [A-Za-z0-9_-]{1,64}",
            ));
        }
        if layer.text.trim().is_empty() {
            out.push(Violation::new(
                pointer(&["layers", id, "text"]),
                "layer text must not be empty",
            ));
        }
    }

    let mut by_rank: BTreeMap<i64, Vec<&str>> = BTreeMap::new();
    for (id, layer) in &config.layers {
        by_rank.entry(layer.order_rank).or_default().push(id);
    }
    for (rank, ids) in &by_rank {
        if ids.len() > 1 {
            out.push(Violation::new(
                pointer(&["layers", ids[1], "order_rank"]),
                format!(
                    "order_rank {rank} is shared by layers {}",
                    ids.iter()
                        .map(|s| format!("`{s}`"))
                        .collect::<Vec<_>>()
                        .join(", ")
                ),
            ));
        }
    }

    if config.conditions.is_empty() {
        out.push(Violation::new(
            "/conditions",
            "at least one condition must be defined",
        ));
    }
    for (id, cond) in &config.conditions {
        if !is_url_safe_token(id) {
            out.push(Violation::new(
                pointer(&["conditions", id]),
                "condition id must match [A-Za-z0-9_-]{1,64}",
            ));
        }
        if cond.base_prompt_layers.is_empty() {
            out.push(Violation::new(
                pointer(&["conditions", id, "base_prompt_layers"]),
                "base_prompt_layers must not be empty",
            ));
        }
        for (i, layer_id) in cond.base_prompt_layers.iter().enumerate() {
            if !config.layers.contains_key(layer_id) {
                out.push(Violation::new(
                    pointer(&["conditions", id, "base_prompt_layers", &i.to_string()]),
                    format!("unknown layer `{layer_id}`"),
                ));
            }
        }
        if let Some(icon) = &cond.display.icon_ref {
            if !icon_resolves(icon, config.assets_dir.as_deref()) {
                out.push(Violation::new(
                    pointer(&["conditions", id, "display", "icon_ref"]),
                    format!("icon `{icon}` does not resolve to a served static asset"),
                ));
            }
        }
    }

    for (id, phase) in &config.phases {
        if !is_url_safe_token(id) {
            out.push(Violation::new(
                pointer(&["phases", id]),
                "phase id must match [A-Za-z0-9_-]{1,64}",
            ));
        }
        for (field, list) in [
            ("activate", &phase.activate),
            ("deactivate", &phase.deactivate),
        ] {
            for (i, layer_id) in list.iter().enumerate() {
                if !config.layers.contains_key(layer_id) {
                    out.push(Violation::new(
                        pointer(&["phases", id, field, &i.to_string()]),
                        format!("unknown layer `{layer_id}`"),
                    ));
                }
            }
        }
        let deactivated: HashMap<&str, usize> = phase
            .deactivate
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        for layer_id in &phase.activate {
            if let Some(i) = deactivated.get(layer_id.as_str()) {
                out.push(Violation::new(
                    pointer(&["phases", id, "deactivate", &i.to_string()]),
                    format!("layer `{layer_id}` is both activated and deactivated"),
                ));
            }
        }
    }

    let b = &config.backend;
    if !(0.0..=2.0).contains(&b.temperature) {
        out.push(Violation::new(
            "/backend/temperature",
            "temperature must be within [0, 2]",
        ));
    }
    if b.max_response_tokens == 0 {
        out.push(Violation::new(
            "/backend/max_response_tokens",
            "max_response_tokens must be positive",
        ));
    }
    if b.request_timeout_ms == 0 {
        out.push(Violation::new(
            "/backend/request_timeout_ms",
            "request_timeout_ms must be positive",
        ));
    }
    if b.retry.max_attempts < 1 {
        out.push(Violation::new(
            "/backend/retry/max_attempts",
            "max_attempts must be at least 1",
        ));
    }
    if b.kind == BackendKind::OpenaiCompatible {
        match b.endpoint_url.as_deref() {
            None => out.push(Violation::new(
                "/backend/endpoint_url",
                "endpoint_url is required for openai_compatible backends",
            )),
            Some(raw) => match url::Url::parse(raw) {
                Ok(u) if u.scheme() == "https" || u.scheme() == "http" => {}
                _ => out.push(Violation::new(
                    "/backend/endpoint_url",
                    "endpoint_url must be an absolute http(s) URL",
                )),
            },
        }
        if b.model_name.trim().is_empty() {
            out.push(Violation::new(
                "/backend/model_name",
                "model_name is required for openai_compatible backends",
            ));
        }
    }

    let l = &config.limits;
    if l.max_user_message_bytes == 0 {
        out.push(Violation::new(
            "/limits/max_user_message_bytes",
            "must be positive",
        ));
    }
    if l.max_turns == 0 {
        out.push(Violation::new("/limits/max_turns", "must be positive"));
    }
    if l.max_context_messages == 0 {
        out.push(Violation::new(
            "/limits/max_context_messages",
            "must be positive",
        ));
    }

    out
}

/// An icon resolves when it names a built-in asset or an existing file under
/// the study's asset directory.
fn icon_resolves(icon_ref: &str, assets_dir: Option<&Path>) -> bool {
    let Some(rel) = assets::static_relative_path(icon_ref) else {
        return false;
    };
    if assets::builtin(icon_ref).is_some() {
        return true;
    }
    match assets_dir {
        Some(dir) => dir.join(rel).is_file(),
        None => false,
    }
}
