//! Core of the survey chat middleware: study definitions, layered system
//! prompts, session handling with full context replay, LLM backends, and the
//! append-only transcript store with its CSV exports.

pub mod assets;
pub mod backend;
pub mod config;
pub mod export;
pub mod postprocess;
pub mod prompt;
pub mod secrets;
pub mod session;
pub mod store;

pub use backend::{
    mock_complete, BackendError, ChatBackend, ChatMessage, ChatRole, FinishReason, LlmRequest,
    LlmResponse, MockBackend, OpenAiCompatibleBackend,
};
pub use config::{
    load_study_config, resolve_condition, validate_config, BackendKind, BackendSettings,
    ConditionSpec, ConfigError, DisplaySpec, MessageLimits, PhaseDirective, PromptLayer,
    RetryPolicy, SelfReferenceMode, StudyConfig, Violation,
};
pub use export::{export_per_conversation_csv, export_per_turn_csv, ExportShape};
pub use prompt::{apply_phase, compose_system_prompt, ComposedPrompt, LayerSet};
pub use secrets::{load_secrets, SecretsBundle, SecretsError};
pub use session::{Exchange, Session, SessionCore, SessionError, Turn};
pub use store::{ExportFilter, SqliteStore, StoredTurn, TranscriptStore, TurnRole};
