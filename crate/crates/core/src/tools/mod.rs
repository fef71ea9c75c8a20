//! Non-delegation tools: filesystem context, allowlisted shell, binary analysis.

mod binary;
mod context;
mod shell;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ObjectRef, ToolId};

pub use binary::{binary_query, BinaryBackend, BinaryBackendKind, MockFixtures};
pub use context::get_context;
pub use shell::{parse_pipeline, shell_execute, ShellConfig, DEFAULT_ALLOWLIST};

pub const DEFAULT_OUTPUT_CAP: usize = 32 * 1024;
pub const STRINGS_OUTPUT_CAP: usize = 8 * 1024;
pub const DEFAULT_TOOL_TIMEOUT: Duration = Duration::from_secs(30);
pub const TRUNCATION_MARKER: &str = "\n...[output truncated]";

/// Record of one tool call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub tool: ToolId,
    pub parameters: serde_json::Value,
    pub scope: ObjectRef,
    pub timeout_ms: u64,
    pub output: String,
    pub truncated: bool,
    pub exit_status: Option<i32>,
    pub ok: bool,
    /// Root-relative files the invocation read.
    #[serde(default)]
    pub files: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ToolError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("forbidden command: {0}")]
    ForbiddenCommand(String),
    #[error("command timed out after {}ms", .0.timeout_ms)]
    Timeout(Box<ToolInvocation>),
    #[error("binary analysis backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("no mock fixture for command {command:?} on {target}")]
    UnknownFixtureKey { target: String, command: String },
    #[error("{0} is not a regular file")]
    NotAFile(String),
    #[error("invalid tool input: {0}")]
    InvalidInput(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Cuts `text` to at most `cap` bytes on a char boundary, appending the
/// truncation marker when anything was dropped.
pub fn cap_output(text: &str, cap: usize) -> (String, bool) {
    if text.len() <= cap {
        return (text.to_string(), false);
    }
    let mut end = cap;
    while !text.is_char_boundary(end) {
        end -= 1;
    }
    (format!("{}{TRUNCATION_MARKER}", &text[..end]), true)
}

/// Counting semaphore bounding concurrent subprocesses.
#[derive(Debug)]
pub struct Semaphore {
    permits: Mutex<usize>,
    cv: Condvar,
}

pub struct Permit<'a>(&'a Semaphore);

impl Semaphore {
    pub fn new(permits: usize) -> Self {
        Semaphore {
            permits: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.cv.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.permits.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.cv.notify_one();
    }
}

/// Everything agents need to run non-delegation tools over one firmware root.
#[derive(Debug, Clone)]
pub struct ToolSuite {
    root: PathBuf,
    pub shell: ShellConfig,
    pub binary: BinaryBackend,
    pub output_cap: usize,
    semaphore: Arc<Semaphore>,
}

impl ToolSuite {
    pub fn new(root: &Path, shell: ShellConfig, binary: BinaryBackend, max_subprocesses: usize) -> Result<Self, ToolError> {
        let root = root
            .canonicalize()
            .map_err(|_| ModelError::RootNotDirectory(root.display().to_string()))?;
        if !root.is_dir() {
            return Err(ModelError::RootNotDirectory(root.display().to_string()).into());
        }
        Ok(ToolSuite {
            root,
            shell,
            binary,
            output_cap: DEFAULT_OUTPUT_CAP,
            semaphore: Arc::new(Semaphore::new(max_subprocesses)),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn get_context(&self, scope: &ObjectRef) -> Result<ToolInvocation, ToolError> {
        let output = get_context(&self.root, scope, self.output_cap)?;
        let files = if scope.kind == crate::model::ObjectKind::Directory {
            vec![]
        } else {
            vec![scope.path.clone()]
        };
        Ok(ToolInvocation {
            tool: ToolId::GetContext,
            parameters: serde_json::json!({ "path": scope.path }),
            scope: scope.clone(),
            timeout_ms: 0,
            truncated: output.ends_with(TRUNCATION_MARKER),
            output,
            exit_status: None,
            ok: true,
            files,
        })
    }

    pub fn shell_execute(&self, cmd: &str, scope: &ObjectRef) -> Result<ToolInvocation, ToolError> {
        let _permit = self.semaphore.acquire();
        shell_execute(&self.root, cmd, scope, &self.shell)
    }

    pub fn binary_query(&self, target: &ObjectRef, command: &str) -> Result<ToolInvocation, ToolError> {
        let _permit = self.semaphore.acquire();
        binary_query(&self.root, target, command, &self.binary, self.shell.timeout, self.output_cap)
    }
}
