//! Extraction, validation and repair of the per-step action envelope.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::llm::{BackendHandle, LlmError};
use crate::model::{AgentType, Budget, Message, ReportPayload, Role, ToolId};

/// Machine-readable schema of the envelope, embedded in role prompts.
pub const ENVELOPE_SCHEMA: &str = include_str!("../schema/envelope.schema.json");

/// Version tag prefixed to every repair feedback message.
pub const FEEDBACK_VERSION: &str = "envelope-feedback/1";

pub const DEFAULT_MAX_PARSE_RETRIES: u32 = 2;

const FEEDBACK_ECHO_CAP: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeStatus {
    Success,
    Failure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EnvelopeAction {
    Tool(ToolId),
    Finish,
}

impl fmt::Display for EnvelopeAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EnvelopeAction::Tool(t) => t.fmt(f),
            EnvelopeAction::Finish => f.write_str("finish"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionEnvelope {
    pub thought: String,
    pub action: EnvelopeAction,
    pub action_input: Value,
    pub status: EnvelopeStatus,
}

impl ActionEnvelope {
    pub fn to_json(&self) -> Value {
        serde_json::json!({
            "thought": self.thought,
            "action": self.action.to_string(),
            "action_input": self.action_input,
            "status": self.status,
        })
    }
}

/// What an agent may legally emit: its tools plus `finish`, whose payload
/// must parse as `role`'s report.
#[derive(Debug, Clone)]
pub struct EnvelopeContract {
    pub allowed: BTreeSet<ToolId>,
    pub role: Option<AgentType>,
}

impl EnvelopeContract {
    pub fn new(allowed: impl IntoIterator<Item = ToolId>, role: Option<AgentType>) -> Self {
        EnvelopeContract {
            allowed: allowed.into_iter().collect(),
            role,
        }
    }

    /// Any known tool, no report check.
    pub fn permissive() -> Self {
        Self::new(ToolId::ALL, None)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParseOutcome {
    Ok,
    ExtractionFailed,
    SchemaViolation,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractionError {
    #[error("no JSON object found in response")]
    ExtractionFailed,
    #[error("schema violation at `{path}`: {detail}")]
    SchemaViolation { path: String, detail: String },
}

impl ExtractionError {
    pub fn outcome(&self) -> ParseOutcome {
        match self {
            ExtractionError::ExtractionFailed => ParseOutcome::ExtractionFailed,
            ExtractionError::SchemaViolation { .. } => ParseOutcome::SchemaViolation,
        }
    }

    fn violation(path: &str, detail: impl Into<String>) -> Self {
        ExtractionError::SchemaViolation {
            path: path.into(),
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseAttempt {
    pub attempt_index: u32,
    pub raw_text: String,
    pub outcome: ParseOutcome,
    pub violation_detail: String,
}

/// Finds the first schema-valid envelope object in `raw`. Surrounding prose
/// and code fences are ignored. When objects are found but none is valid,
/// the first object's violation is reported.
pub fn extract_envelope(raw: &str, contract: &EnvelopeContract) -> Result<ActionEnvelope, ExtractionError> {
    let mut first_violation = None;
    for (start, _) in raw.match_indices('{') {
        let mut stream = serde_json::Deserializer::from_str(&raw[start..]).into_iter::<Value>();
        let Some(Ok(Value::Object(obj))) = stream.next() else { continue };
        match validate_object(&obj, contract) {
            Ok(env) => return Ok(env),
            Err(e) => {
                first_violation.get_or_insert(e);
            }
        }
    }
    Err(first_violation.unwrap_or(ExtractionError::ExtractionFailed))
}

fn validate_object(obj: &Map<String, Value>, contract: &EnvelopeContract) -> Result<ActionEnvelope, ExtractionError> {
    let thought = match obj.get("thought") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ExtractionError::violation("thought", "expected a string")),
        None => return Err(ExtractionError::violation("thought", "missing required field")),
    };
    let action_name = match obj.get("action") {
        Some(Value::String(s)) => s.trim().to_string(),
        Some(_) => return Err(ExtractionError::violation("action", "expected a string")),
        None => return Err(ExtractionError::violation("action", "missing required field")),
    };
    let action = if action_name.eq_ignore_ascii_case("finish") {
        EnvelopeAction::Finish
    } else {
        match action_name.parse::<ToolId>() {
            Ok(t) if contract.allowed.contains(&t) => EnvelopeAction::Tool(t),
            _ => {
                let names: Vec<&str> = contract.allowed.iter().map(|t| t.as_str()).collect();
                return Err(ExtractionError::violation(
                    "action",
                    format!("{action_name:?} is not one of [{}] or \"finish\"", names.join(", ")),
                ));
            }
        }
    };
    let action_input = obj
        .get("action_input")
        .cloned()
        .ok_or_else(|| ExtractionError::violation("action_input", "missing required field"))?;
    let status = match obj.get("status") {
        Some(Value::String(s)) if s == "success" => EnvelopeStatus::Success,
        Some(Value::String(s)) if s == "failure" => EnvelopeStatus::Failure,
        Some(_) => return Err(ExtractionError::violation("status", "expected \"success\" or \"failure\"")),
        None => return Err(ExtractionError::violation("status", "missing required field")),
    };
    if let (EnvelopeAction::Finish, Some(role), EnvelopeStatus::Success) = (action, contract.role, status) {
        if let Err(e) = ReportPayload::parse_for(role, &strip_role_tag(&action_input)) {
            return Err(ExtractionError::violation(
                "action_input",
                format!("final report does not match the {role} report format: {e}"),
            ));
        }
    }
    Ok(ActionEnvelope {
        thought,
        action,
        action_input,
        status,
    })
}

/// Models sometimes echo the `role` discriminator; it is not part of the
/// finish payload.
pub(crate) fn strip_role_tag(v: &Value) -> Value {
    let mut v = v.clone();
    if let Value::Object(m) = &mut v {
        m.remove("role");
    }
    v
}

/// Text of the error-role entry appended after an unusable response.
pub fn feedback_message(err: &ExtractionError, raw: &str) -> String {
    let mut echo: String = raw.chars().take(FEEDBACK_ECHO_CAP).collect();
    if echo.len() < raw.len() {
        echo.push_str(" ...");
    }
    let problem = match err {
        ExtractionError::ExtractionFailed => "no JSON object was found".to_string(),
        ExtractionError::SchemaViolation { path, detail } => format!("schema violation at `{path}`: {detail}"),
    };
    format!(
        "[{FEEDBACK_VERSION}] Your previous response could not be used: {problem}. \
Reply with exactly one JSON object with the fields thought, action, action_input and status.\n\
Previous response:\n{echo}"
    )
}

#[derive(Debug, Error)]
pub enum RepairError {
    #[error("no valid envelope after {} completions", attempts.len())]
    EnvelopeFailure { attempts: Vec<ParseAttempt> },
    #[error(transparent)]
    Service(#[from] LlmError),
}

/// Queries until a valid envelope arrives, feeding violations back as
/// error-role entries. Issues at most `1 + max_parse_retries` completions.
///
/// On success the envelope is appended to `memory` as one assistant entry.
pub fn repair_loop(
    handle: &BackendHandle,
    memory: &mut Vec<Message>,
    budget: &Budget,
    max_parse_retries: u32,
    contract: &EnvelopeContract,
) -> Result<(ActionEnvelope, Vec<ParseAttempt>), RepairError> {
    let mut attempts = Vec::new();
    for attempt_index in 0..=max_parse_retries {
        let raw = handle.complete(memory, budget)?;
        match extract_envelope(&raw, contract) {
            Ok(env) => {
                attempts.push(ParseAttempt {
                    attempt_index,
                    raw_text: raw,
                    outcome: ParseOutcome::Ok,
                    violation_detail: String::new(),
                });
                memory.push(Message::new(Role::Assistant, env.to_json().to_string()));
                return Ok((env, attempts));
            }
            Err(e) => {
                memory.push(Message::new(Role::Error, feedback_message(&e, &raw)));
                attempts.push(ParseAttempt {
                    attempt_index,
                    raw_text: raw,
                    outcome: e.outcome(),
                    violation_detail: e.to_string(),
                });
            }
        }
    }
    Err(RepairError::EnvelopeFailure { attempts })
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Arc;

    use serde_json::json;

    use super::*;
    use crate::llm::{ScriptReply, ScriptedBackend};
    use crate::model::ObjectKind;

    fn finish_json() -> String {
        json!({"thought":"t","action":"finish","action_input":{"findings":[]},"status":"success"}).to_string()
    }

    #[test]
    fn exact_instance_parses() {
        let env = extract_envelope(&finish_json(), &EnvelopeContract::new([], Some(ObjectKind::File))).unwrap();
        assert_eq!(env.action, EnvelopeAction::Finish);
        assert_eq!(env.status, EnvelopeStatus::Success);
    }

    #[test]
    fn prose_and_fence_wrapping_tolerated() {
        let c = EnvelopeContract::permissive();
        let plain = extract_envelope(&finish_json(), &c).unwrap();
        let wrapped = format!("Sure! ```json\n{}\n``` trailing prose {{not json}}", finish_json());
        assert_eq!(extract_envelope(&wrapped, &c).unwrap(), plain);
    }

    #[test]
    fn missing_action_reports_path() {
        let err = extract_envelope(r#"{"thought":"t","status":"success"}"#, &EnvelopeContract::permissive()).unwrap_err();
        assert!(matches!(err, ExtractionError::SchemaViolation { ref path, .. } if path == "action"), "{err}");
    }

    #[test]
    fn no_json_is_extraction_failure() {
        assert_eq!(
            extract_envelope("I refuse.", &EnvelopeContract::permissive()),
            Err(ExtractionError::ExtractionFailed)
        );
    }

    #[test]
    fn first_valid_object_wins() {
        let a = json!({"thought":"a","action":"GetContext","action_input":{},"status":"success"});
        let b = json!({"thought":"b","action":"GetContext","action_input":{},"status":"success"});
        let text = format!(r#"{{"note": 1}} {a} {b}"#);
        assert_eq!(extract_envelope(&text, &EnvelopeContract::permissive()).unwrap().thought, "a");
    }

    #[test]
    fn tools_outside_contract_rejected() {
        let c = EnvelopeContract::new([ToolId::GetContext], Some(ObjectKind::Directory));
        let raw = json!({"thought":"","action":"Store","action_input":{},"status":"success"}).to_string();
        assert!(matches!(
            extract_envelope(&raw, &c),
            Err(ExtractionError::SchemaViolation { ref path, .. }) if path == "action"
        ));
        let unknown = json!({"thought":"","action":"rm","action_input":{},"status":"success"}).to_string();
        assert!(extract_envelope(&unknown, &EnvelopeContract::permissive()).is_err());
    }

    #[test]
    fn finish_payload_checked_against_role() {
        let raw = json!({"thought":"","action":"finish","action_input":{"findings":"nope"},"status":"success"}).to_string();
        assert!(extract_envelope(&raw, &EnvelopeContract::new([], Some(ObjectKind::File))).is_err());
        assert!(extract_envelope(&raw, &EnvelopeContract::new([], None)).is_ok());
    }

    fn counting(responses: Vec<&'static str>) -> (Arc<AtomicU32>, BackendHandle) {
        let n = Arc::new(AtomicU32::new(0));
        let n2 = n.clone();
        let policy = move |_: Option<&crate::llm::AgentBinding>, _: &[Message]| {
            let i = n2.fetch_add(1, Ordering::SeqCst) as usize;
            ScriptReply::Text(responses[i.min(responses.len() - 1)].to_string())
        };
        let h = BackendHandle::new(Arc::new(ScriptedBackend::new(policy)), 0.0, 0).unwrap();
        (n, h)
    }

    fn base_memory() -> Vec<Message> {
        vec![Message::new(Role::System, "s"), Message::new(Role::User, "u")]
    }

    #[test]
    fn invalid_then_valid_uses_two_completions() {
        let valid: &'static str = Box::leak(finish_json().into_boxed_str());
        let (n, h) = counting(vec!["garbage", valid]);
        let mut mem = base_memory();
        let (env, attempts) = repair_loop(&h, &mut mem, &Budget::default(), 2, &EnvelopeContract::permissive()).unwrap();
        assert_eq!(env.action, EnvelopeAction::Finish);
        assert_eq!(n.load(Ordering::SeqCst), 2);
        assert_eq!(attempts.len(), 2);
        assert_eq!(mem[2].role, Role::Error);
        assert!(mem[2].content.starts_with("[envelope-feedback/1]"));
        assert_eq!(mem[3].role, Role::Assistant);
    }

    #[test]
    fn always_invalid_fails_after_one_plus_retries() {
        let (n, h) = counting(vec!["{\"thought\": 1}"]);
        let mut mem = base_memory();
        let err = repair_loop(&h, &mut mem, &Budget::default(), 2, &EnvelopeContract::permissive()).unwrap_err();
        assert_eq!(n.load(Ordering::SeqCst), 3);
        match err {
            RepairError::EnvelopeFailure { attempts } => {
                assert_eq!(attempts.len(), 3);
                assert!(attempts.iter().all(|a| a.outcome == ParseOutcome::SchemaViolation));
            }
            other => panic!("{other}"),
        }
        assert!(!mem.iter().any(|m| m.role == Role::Assistant));
    }

    #[test]
    fn valid_first_try_adds_one_assistant_entry() {
        let valid: &'static str = Box::leak(finish_json().into_boxed_str());
        let (n, h) = counting(vec![valid]);
        let mut mem = base_memory();
        repair_loop(&h, &mut mem, &Budget::default(), 2, &EnvelopeContract::permissive()).unwrap();
        assert_eq!(n.load(Ordering::SeqCst), 1);
        assert_eq!(mem.len(), 3);
        assert_eq!(mem.iter().filter(|m| m.role == Role::Assistant).count(), 1);
    }

    #[test]
    fn schema_document_is_valid_json() {
        let v: Value = serde_json::from_str(ENVELOPE_SCHEMA).unwrap();
        assert_eq!(v["required"], json!(["thought", "action", "action_input", "status"]));
    }
}
