//! Scripted simulated participants for a running daemon, plus the checks that
//! turn a run and its export into a list of violations.

mod export;
mod run;
mod script;
mod verify;

use thiserror::Error;

pub use export::export_cli;
pub use run::{run_simulation, RequestKind, RequestRecord, RunOptions, SessionReport, SimReport};
pub use script::{sentinel, ConditionAssignment, PhaseStep, SimScript};
pub use verify::{verify_report, Violation};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("target unreachable: {0}")]
    TargetUnreachable(String),
    #[error("invalid script: {0}")]
    ScriptInvalid(String),
    #[error("target uses the `{0}` backend; pass --live-i-understand-costs to run against it")]
    LiveBackendRefused(String),
    #[error("database unreadable: {0}")]
    DbUnreadable(String),
    #[error("export is not valid CSV: {0}")]
    BadExport(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
