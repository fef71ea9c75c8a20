//! Shared domain types: objects, tasks, agent configuration, findings.

mod agent;
mod finding;
mod object;
mod report;

pub use agent::{
    AgentConfig, AgentId, AgentType, Budget, ChildResult, Message, NodeState, ResultStatus, Role, TaskSpec,
    ToANode, TokenUsage, ToolId,
};
pub use finding::{
    normalize_link_id, normalize_whitespace, validate_finding, Confidence, Evidence, EvidenceLocator, Finding,
    SemanticType, TraceKind, TraceStep, ValidationReport,
};
pub use finding::epoch;
pub use object::{join_relative, normalize_object_ref, normalize_relative, FunctionLocator, ObjectKind, ObjectRef};
pub(crate) use object::{confined, path_is_within};
pub use report::{DirectoryReport, FileReport, FunctionReport, ReportPayload};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("path escapes the firmware root: {0}")]
    PathEscape(String),
    #[error("path not found: {0}")]
    NotFound(String),
    #[error("firmware root is not a directory: {0}")]
    RootNotDirectory(String),
    #[error("invalid object reference: {0}")]
    InvalidObject(String),
    #[error("goal must not be empty")]
    EmptyGoal,
    #[error("budget field {0} must be at least 1")]
    InvalidBudget(&'static str),
    #[error("invalid agent id {0:?}")]
    InvalidAgentId(String),
    #[error("unknown tool {0:?}")]
    UnknownTool(String),
    #[error("illegal state transition {from:?} -> {to:?}")]
    IllegalTransition { from: NodeState, to: NodeState },
}
