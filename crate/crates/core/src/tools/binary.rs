//! Binary analysis over an external disassembler (radare2) or a mock
//! backend that answers from fixture files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{cap_output, ToolError, ToolInvocation};
use crate::model::{confined, normalize_whitespace, ModelError, ObjectKind, ObjectRef, ToolId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinaryBackendKind {
    ExternalDisassembler,
    Mock,
}

#[derive(Debug, Deserialize)]
struct FixtureFile {
    target: String,
    commands: BTreeMap<String, String>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum FixtureDoc {
    One(FixtureFile),
    Many(Vec<FixtureFile>),
}

/// Canned outputs keyed by (root-relative target, normalized command).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MockFixtures {
    entries: BTreeMap<(String, String), String>,
}

impl MockFixtures {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, target: &str, command: &str, output: impl Into<String>) {
        self.entries
            .insert((target.trim_start_matches('/').to_string(), normalize_whitespace(command)), output.into());
    }

    pub fn with(mut self, target: &str, command: &str, output: impl Into<String>) -> Self {
        self.insert(target, command, output);
        self
    }

    /// Loads every `*.json` file in `dir`. Each holds one
    /// `{"target": .., "commands": {..}}` object or an array of them.
    pub fn load_dir(dir: &Path) -> Result<Self, ToolError> {
        let mut fx = MockFixtures::new();
        let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for p in paths {
            let text = std::fs::read_to_string(&p)?;
            let doc: FixtureDoc = serde_json::from_str(&text)
                .map_err(|e| ToolError::InvalidInput(format!("{}: {e}", p.display())))?;
            let files = match doc {
                FixtureDoc::One(f) => vec![f],
                FixtureDoc::Many(v) => v,
            };
            for f in files {
                for (cmd, out) in f.commands {
                    fx.insert(&f.target, &cmd, out);
                }
            }
        }
        Ok(fx)
    }

    pub fn lookup(&self, target: &str, command: &str) -> Option<&str> {
        self.entries
            .get(&(target.to_string(), normalize_whitespace(command)))
            .map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone)]
pub enum BinaryBackend {
    External {
        program: PathBuf,
        /// Analysis commands run before each request, e.g. `aa`.
        prelude: String,
        available: bool,
    },
    Mock(Arc<MockFixtures>),
}

impl BinaryBackend {
    /// Locates the disassembler and probes it once with `-v`.
    pub fn external(program: impl Into<PathBuf>) -> Self {
        let program = program.into();
        let available = Command::new(&program)
            .arg("-v")
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false);
        if !available {
            log::warn!("disassembler {} not available", program.display());
        }
        BinaryBackend::External {
            program,
            prelude: "aa".into(),
            available,
        }
    }

    /// Uses `$TOA_R2` when set, `r2` otherwise.
    pub fn external_from_env() -> Self {
        Self::external(std::env::var_os("TOA_R2").map(PathBuf::from).unwrap_or_else(|| "r2".into()))
    }

    pub fn mock(fixtures: MockFixtures) -> Self {
        BinaryBackend::Mock(Arc::new(fixtures))
    }

    pub fn kind(&self) -> BinaryBackendKind {
        match self {
            BinaryBackend::External { .. } => BinaryBackendKind::ExternalDisassembler,
            BinaryBackend::Mock(_) => BinaryBackendKind::Mock,
        }
    }

    pub fn is_available(&self) -> bool {
        match self {
            BinaryBackend::External { available, .. } => *available,
            BinaryBackend::Mock(_) => true,
        }
    }
}

impl Default for BinaryBackend {
    fn default() -> Self {
        BinaryBackend::mock(MockFixtures::new())
    }
}

fn run_external(program: &Path, prelude: &str, command: &str, file: &Path, timeout: Duration) -> Result<(String, Option<i32>, bool), ToolError> {
    if command.contains(['!', '|', '>', '`', '\n']) {
        return Err(ToolError::ForbiddenCommand(format!("disassembler command {command:?}")));
    }
    let script = if prelude.is_empty() { command.to_string() } else { format!("{prelude}; {command}") };
    let mut child = Command::new(program)
        .args(["-q", "-e", "scr.color=0", "-e", "cfg.sandbox=true", "-c", &script])
        .arg(file)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .map_err(|e| ToolError::BackendUnavailable(e.to_string()))?;
    let mut stdout = child.stdout.take().unwrap();
    let reader = std::thread::spawn(move || {
        let mut buf = Vec::new();
        let _ = std::io::Read::read_to_end(&mut stdout, &mut buf);
        buf
    });
    let deadline = Instant::now() + timeout;
    let (status, timed_out) = loop {
        if let Some(s) = child.try_wait()? {
            break (Some(s), false);
        }
        if Instant::now() >= deadline {
            let _ = child.kill();
            break (child.wait().ok(), true);
        }
        std::thread::sleep(Duration::from_millis(5));
    };
    let out = reader.join().unwrap_or_default();
    Ok((String::from_utf8_lossy(&out).into_owned(), status.and_then(|s| s.code()), timed_out))
}

/// Runs one analysis `command` against the binary `target`.
pub fn binary_query(
    root: &Path,
    target: &ObjectRef,
    command: &str,
    backend: &BinaryBackend,
    timeout: Duration,
    cap: usize,
) -> Result<ToolInvocation, ToolError> {
    let target = target.renormalized()?;
    if target.kind == ObjectKind::Directory {
        return Err(ToolError::NotAFile(target.path.clone()));
    }
    let file = root.join(&target.path);
    if !confined(root, &file) {
        return Err(ModelError::PathEscape(target.path.clone()).into());
    }
    if command.trim().is_empty() {
        return Err(ToolError::InvalidInput("empty analysis command".into()));
    }
    let (text, exit_status, timed_out) = match backend {
        BinaryBackend::Mock(fx) => {
            let out = fx.lookup(&target.path, command).ok_or_else(|| ToolError::UnknownFixtureKey {
                target: target.path.clone(),
                command: command.to_string(),
            })?;
            (out.to_string(), Some(0), false)
        }
        BinaryBackend::External {
            program,
            prelude,
            available,
        } => {
            if !available {
                return Err(ToolError::BackendUnavailable(program.display().to_string()));
            }
            if !file.is_file() {
                return Err(ToolError::NotAFile(target.path.clone()));
            }
            run_external(program, prelude, command, &file, timeout)?
        }
    };
    let (output, truncated) = cap_output(&text, cap);
    let inv = ToolInvocation {
        tool: ToolId::BinaryAnalysis,
        parameters: serde_json::json!({ "target": target.path, "command": command }),
        files: vec![target.path.clone()],
        scope: target,
        timeout_ms: timeout.as_millis() as u64,
        output,
        truncated,
        exit_status,
        ok: !timed_out && exit_status == Some(0),
    };
    if timed_out {
        return Err(ToolError::Timeout(Box::new(inv)));
    }
    Ok(inv)
}
