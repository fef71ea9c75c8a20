//! Uniform client layer over completion backends.
//!
//! Every agent talks to its own [`BackendHandle`], obtained through
//! [`BackendHandle::spawn_isolated_client`]. Handles share the backend
//! implementation but nothing mutable except the run-level token ledger.

mod ledger;
mod remote;
mod scripted;

use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentId, AgentType, Budget, Message, ObjectRef, Role, TokenUsage};

pub use ledger::TokenLedger;
pub use remote::{RemoteBackend, RemoteConfig};
pub use scripted::{
    default_finish, FaultInjector, ScriptPolicy, ScriptReply, ScriptResponse, ScriptRule, ScriptedBackend,
    ScriptedPolicy,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpRemote,
    Scripted,
}

/// Identity of the agent a handle serves. Remote backends ignore it; the
/// scripted backend matches rules against it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentBinding {
    pub agent_id: AgentId,
    pub agent_type: AgentType,
    pub object: ObjectRef,
    pub goal: String,
}

pub struct CompletionRequest<'a> {
    pub memory: &'a [Message],
    pub temperature: f64,
    pub seed: u64,
    pub binding: Option<&'a AgentBinding>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub prompt_tokens: Option<u64>,
    pub completion_tokens: Option<u64>,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Completion {
            text: text.into(),
            prompt_tokens: None,
            completion_tokens: None,
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum BackendError {
    #[error("transient backend error: {0}")]
    Transient(String),
    #[error("backend error: {0}")]
    Fatal(String),
}

/// A single-shot completion provider. Retries live in [`BackendHandle`].
pub trait CompletionBackend: Send + Sync {
    fn kind(&self) -> BackendKind;

    fn complete_once(&self, req: &CompletionRequest<'_>) -> Result<Completion, BackendError>;

    /// Delay before retry number `retry` (1-based).
    fn backoff(&self, retry: u32) -> Duration {
        Duration::from_millis(500u64.saturating_mul(1u64 << (retry - 1).min(16)))
    }

    fn describe(&self) -> String;
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum LlmError {
    #[error("memory must not be empty")]
    EmptyMemory,
    #[error("first memory entry must have role system")]
    NotSystemFirst,
    #[error("temperature {0} outside [0, 2]")]
    InvalidTemperature(f64),
    #[error("service failure after {attempts} attempts: {last_error}")]
    ServiceFailure { attempts: u32, last_error: String },
}

/// Per-agent client: backend plus decoding settings plus ledgers.
#[derive(Clone)]
pub struct BackendHandle {
    backend: Arc<dyn CompletionBackend>,
    temperature: f64,
    seed: u64,
    binding: Option<AgentBinding>,
    agent_ledger: Arc<TokenLedger>,
    run_ledger: Arc<TokenLedger>,
}

impl std::fmt::Debug for BackendHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendHandle")
            .field("backend", &self.backend.describe())
            .field("temperature", &self.temperature)
            .field("seed", &self.seed)
            .field("binding", &self.binding)
            .finish()
    }
}

impl BackendHandle {
    pub fn new(backend: Arc<dyn CompletionBackend>, temperature: f64, seed: u64) -> Result<Self, LlmError> {
        if !(0.0..=2.0).contains(&temperature) || temperature.is_nan() {
            return Err(LlmError::InvalidTemperature(temperature));
        }
        Ok(BackendHandle {
            backend,
            temperature,
            seed,
            binding: None,
            agent_ledger: Arc::new(TokenLedger::default()),
            run_ledger: Arc::new(TokenLedger::default()),
        })
    }

    pub fn scripted(policy: impl ScriptPolicy + 'static, seed: u64) -> Self {
        Self::new(Arc::new(ScriptedBackend::new(policy)), 0.0, seed).expect("temperature 0 is valid")
    }

    pub fn kind(&self) -> BackendKind {
        self.backend.kind()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn describe(&self) -> String {
        self.backend.describe()
    }

    pub fn binding(&self) -> Option<&AgentBinding> {
        self.binding.as_ref()
    }

    /// A fresh client over the same backend: new per-agent ledger, same
    /// run-level ledger, no binding.
    pub fn spawn_isolated_client(&self) -> BackendHandle {
        BackendHandle {
            backend: Arc::clone(&self.backend),
            temperature: self.temperature,
            seed: self.seed,
            binding: None,
            agent_ledger: Arc::new(TokenLedger::default()),
            run_ledger: Arc::clone(&self.run_ledger),
        }
    }

    /// Same as [`spawn_isolated_client`](Self::spawn_isolated_client) but
    /// with a fresh run-level ledger too; used when starting a new run.
    pub fn fresh_run(&self) -> BackendHandle {
        let mut h = self.spawn_isolated_client();
        h.run_ledger = Arc::new(TokenLedger::default());
        h
    }

    pub fn bind(mut self, binding: AgentBinding) -> Self {
        self.binding = Some(binding);
        self
    }

    pub fn agent_usage(&self) -> TokenUsage {
        self.agent_ledger.snapshot()
    }

    pub fn run_usage(&self) -> TokenUsage {
        self.run_ledger.snapshot()
    }

    /// Queries the backend, retrying failures up to `budget.max_llm_retries`
    /// times. The ledgers are updated once per successful call.
    pub fn complete(&self, memory: &[Message], budget: &Budget) -> Result<String, LlmError> {
        let first = memory.first().ok_or(LlmError::EmptyMemory)?;
        if first.role != Role::System {
            return Err(LlmError::NotSystemFirst);
        }
        let req = CompletionRequest {
            memory,
            temperature: self.temperature,
            seed: self.seed,
            binding: self.binding.as_ref(),
        };
        let max_attempts = 1 + budget.max_llm_retries();
        let mut last_error = String::new();
        for attempt in 1..=max_attempts {
            if attempt > 1 {
                let delay = self.backend.backoff(attempt - 1);
                if !delay.is_zero() {
                    std::thread::sleep(delay);
                }
            }
            match self.backend.complete_once(&req) {
                Ok(c) => {
                    let prompt = c.prompt_tokens.unwrap_or_else(|| estimate_tokens_all(memory));
                    let completion = c.completion_tokens.unwrap_or_else(|| estimate_tokens(&c.text));
                    self.agent_ledger.record(prompt, completion);
                    self.run_ledger.record(prompt, completion);
                    return Ok(c.text);
                }
                Err(BackendError::Fatal(e)) => {
                    log::warn!("fatal backend error on attempt {attempt}: {e}");
                    return Err(LlmError::ServiceFailure {
                        attempts: attempt,
                        last_error: e,
                    });
                }
                Err(BackendError::Transient(e)) => {
                    log::debug!("backend attempt {attempt}/{max_attempts} failed: {e}");
                    last_error = e;
                }
            }
        }
        Err(LlmError::ServiceFailure {
            attempts: max_attempts,
            last_error,
        })
    }
}

/// Free-function form of [`BackendHandle::complete`].
pub fn complete(handle: &BackendHandle, memory: &[Message], budget: &Budget) -> Result<String, LlmError> {
    handle.complete(memory, budget)
}

/// Rough token estimate (4 bytes per token) for backends that do not report
/// usage.
pub fn estimate_tokens(text: &str) -> u64 {
    (text.len() as u64).div_ceil(4)
}

fn estimate_tokens_all(memory: &[Message]) -> u64 {
    memory.iter().map(|m| estimate_tokens(&m.content)).sum()
}

#[cfg(test)]
mod tests {
    use std::sync::atomic::{AtomicU32, Ordering};

    use super::*;

    struct Flaky {
        failures: u32,
        attempts: AtomicU32,
    }

    impl CompletionBackend for Flaky {
        fn kind(&self) -> BackendKind {
            BackendKind::Scripted
        }
        fn complete_once(&self, _req: &CompletionRequest<'_>) -> Result<Completion, BackendError> {
            let n = self.attempts.fetch_add(1, Ordering::SeqCst) + 1;
            if n <= self.failures {
                Err(BackendError::Transient(format!("injected #{n}")))
            } else {
                Ok(Completion::text("ok"))
            }
        }
        fn backoff(&self, _retry: u32) -> Duration {
            Duration::ZERO
        }
        fn describe(&self) -> String {
            "flaky".into()
        }
    }

    fn memory() -> Vec<Message> {
        vec![Message::new(Role::System, "sys"), Message::new(Role::User, "hi")]
    }

    fn flaky(failures: u32) -> (Arc<Flaky>, BackendHandle) {
        let b = Arc::new(Flaky {
            failures,
            attempts: AtomicU32::new(0),
        });
        let h = BackendHandle::new(b.clone(), 0.0, 7).unwrap();
        (b, h)
    }

    #[test]
    fn three_failures_then_success_within_three_retries() {
        let (b, h) = flaky(3);
        assert_eq!(h.complete(&memory(), &Budget::default()).unwrap(), "ok");
        assert_eq!(b.attempts.load(Ordering::SeqCst), 4);
        assert_eq!(h.agent_usage().calls, 1);
    }

    #[test]
    fn four_failures_exhaust_retries() {
        let (b, h) = flaky(4);
        let err = h.complete(&memory(), &Budget::default()).unwrap_err();
        assert_eq!(b.attempts.load(Ordering::SeqCst), 1 + 3);
        assert!(matches!(err, LlmError::ServiceFailure { attempts: 4, .. }));
        assert_eq!(h.run_usage().calls, 0);
    }

    #[test]
    fn memory_preconditions() {
        let (_, h) = flaky(0);
        assert_eq!(h.complete(&[], &Budget::default()), Err(LlmError::EmptyMemory));
        assert_eq!(
            h.complete(&[Message::new(Role::User, "x")], &Budget::default()),
            Err(LlmError::NotSystemFirst)
        );
    }

    #[test]
    fn temperature_range_enforced() {
        let b: Arc<dyn CompletionBackend> = Arc::new(Flaky {
            failures: 0,
            attempts: AtomicU32::new(0),
        });
        assert!(BackendHandle::new(b.clone(), 2.5, 0).is_err());
        assert!(BackendHandle::new(b, 2.0, 0).is_ok());
    }

    #[test]
    fn isolated_clients_keep_separate_ledgers_and_roll_up() {
        let (_, parent) = flaky(0);
        let a = parent.spawn_isolated_client();
        let b = parent.spawn_isolated_client();
        for _ in 0..5 {
            a.complete(&memory(), &Budget::default()).unwrap();
            b.complete(&memory(), &Budget::default()).unwrap();
        }
        assert_eq!(parent.agent_usage().calls, 0);
        assert_eq!(a.agent_usage().calls, 5);
        let total = parent.run_usage();
        assert_eq!(total.calls, 10);
        let sum = a.agent_usage().prompt_tokens + b.agent_usage().prompt_tokens;
        assert_eq!(total.prompt_tokens, sum);
        let dropped = parent.spawn_isolated_client();
        drop(dropped);
        assert_eq!(parent.run_usage(), total);
    }
}
