//! Allowlisted, read-only command execution scoped to a firmware subtree.
//!
//! Commands never go through a shell. The text is tokenized here, unquoted
//! `|` splits pipeline stages, and every other shell operator is rejected.

use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{cap_output, ToolError, ToolInvocation, DEFAULT_OUTPUT_CAP, DEFAULT_TOOL_TIMEOUT, STRINGS_OUTPUT_CAP};
use crate::model::{confined, ModelError, ObjectKind, ObjectRef, ToolId};

pub const DEFAULT_ALLOWLIST: [&str; 11] = [
    "ls", "file", "grep", "find", "cat", "head", "strings", "stat", "wc", "readlink", "md5sum",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ShellConfig {
    pub allowlist: Vec<String>,
    #[serde(with = "secs")]
    pub timeout: Duration,
    pub output_cap: usize,
    pub strings_cap: usize,
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        if !(v > 0.0) {
            return Err(serde::de::Error::custom("timeout must be positive"));
        }
        Ok(Duration::from_secs_f64(v))
    }
}

impl Default for ShellConfig {
    fn default() -> Self {
        ShellConfig {
            allowlist: DEFAULT_ALLOWLIST.iter().map(|s| s.to_string()).collect(),
            timeout: DEFAULT_TOOL_TIMEOUT,
            output_cap: DEFAULT_OUTPUT_CAP,
            strings_cap: STRINGS_OUTPUT_CAP,
        }
    }
}

fn forbid(msg: impl Into<String>) -> ToolError {
    ToolError::ForbiddenCommand(msg.into())
}

/// Splits a command line into pipeline stages of argv vectors.
pub fn parse_pipeline(cmd: &str) -> Result<Vec<Vec<String>>, ToolError> {
    #[derive(PartialEq)]
    enum Q {
        None,
        Single,
        Double,
    }
    let mut stages: Vec<Vec<String>> = vec![Vec::new()];
    let mut cur = String::new();
    let mut in_word = false;
    let mut q = Q::None;
    let mut chars = cmd.chars().peekable();
    while let Some(c) = chars.next() {
        match q {
            Q::Single => {
                if c == '\'' {
                    q = Q::None;
                } else {
                    cur.push(c);
                }
            }
            Q::Double => match c {
                '"' => q = Q::None,
                '`' => return Err(forbid("command substitution")),
                '$' if chars.peek() == Some(&'(') => return Err(forbid("command substitution")),
                '\\' => match chars.next() {
                    Some(n @ ('"' | '\\' | '$' | '`')) => cur.push(n),
                    Some(n) => {
                        cur.push('\\');
                        cur.push(n);
                    }
                    None => return Err(forbid("dangling escape")),
                },
                _ => cur.push(c),
            },
            Q::None => match c {
                '\'' => {
                    q = Q::Single;
                    in_word = true;
                }
                '"' => {
                    q = Q::Double;
                    in_word = true;
                }
                '\\' => match chars.next() {
                    Some(n) => {
                        cur.push(n);
                        in_word = true;
                    }
                    None => return Err(forbid("dangling escape")),
                },
                ' ' | '\t' => {
                    if in_word {
                        stages.last_mut().unwrap().push(std::mem::take(&mut cur));
                        in_word = false;
                    }
                }
                '|' => {
                    if chars.peek() == Some(&'|') {
                        return Err(forbid("`||` is not permitted"));
                    }
                    if in_word {
                        stages.last_mut().unwrap().push(std::mem::take(&mut cur));
                        in_word = false;
                    }
                    stages.push(Vec::new());
                }
                ';' | '&' | '>' | '<' | '`' | '\n' | '\r' => {
                    return Err(forbid(format!("shell operator {c:?} is not permitted")))
                }
                '$' if chars.peek() == Some(&'(') => return Err(forbid("command substitution")),
                _ => {
                    cur.push(c);
                    in_word = true;
                }
            },
        }
    }
    if q != Q::None {
        return Err(forbid("unterminated quote"));
    }
    if in_word {
        stages.last_mut().unwrap().push(cur);
    }
    if stages.iter().any(|s| s.is_empty()) {
        return Err(forbid("empty pipeline stage"));
    }
    Ok(stages)
}

const FIND_FORBIDDEN: &[&str] = &[
    "-exec", "-execdir", "-ok", "-okdir", "-delete", "-fprint", "-fprint0", "-fprintf", "-fls", "-L", "-follow",
];

/// Checks one stage against the allowlist and returns the positional
/// arguments that name paths.
fn check_stage(argv: &[String], config: &ShellConfig) -> Result<Vec<String>, ToolError> {
    let prog = &argv[0];
    if prog.contains('/') || !config.allowlist.iter().any(|a| a == prog) {
        return Err(forbid(format!("{prog:?} is not on the allowlist")));
    }
    let args = &argv[1..];
    let mut paths = Vec::new();
    match prog.as_str() {
        "find" => {
            if let Some(bad) = args.iter().find(|a| FIND_FORBIDDEN.contains(&a.as_str())) {
                return Err(forbid(format!("find {bad} is not permitted")));
            }
            // leading positionals are start points; the rest is the expression
            paths.extend(args.iter().take_while(|a| !a.starts_with('-') && *a != "(" && *a != "!").cloned());
        }
        "grep" => {
            let mut pattern_given = false;
            let mut it = args.iter().peekable();
            let mut end_of_opts = false;
            while let Some(a) = it.next() {
                if !end_of_opts && a == "--" {
                    end_of_opts = true;
                } else if !end_of_opts && (a == "-R" || a == "--dereference-recursive" || (a.starts_with('-') && !a.starts_with("--") && a.contains('R'))) {
                    return Err(forbid("grep -R follows symlinks out of the tree"));
                } else if !end_of_opts && (a == "-e" || a == "--regexp" || a == "-f" || a == "--file") {
                    pattern_given = true;
                    it.next();
                } else if !end_of_opts && (a.starts_with("--regexp=") || a.starts_with("--file=")) {
                    pattern_given = true;
                } else if !end_of_opts && a.starts_with('-') && a.len() > 1 {
                    continue;
                } else if !pattern_given {
                    pattern_given = true;
                } else {
                    paths.push(a.clone());
                }
            }
        }
        "file" => {
            if args.iter().any(|a| a == "-C" || a == "--compile") {
                return Err(forbid("file -C writes a magic database"));
            }
            paths.extend(args.iter().filter(|a| !a.starts_with('-')).cloned());
        }
        _ => paths.extend(args.iter().filter(|a| !a.starts_with('-')).cloned()),
    }
    Ok(paths)
}

/// Resolves a path argument relative to the working directory and confines
/// it to the root. Returns the root-relative path when it names a file.
fn check_path_arg(root: &Path, cwd: &Path, arg: &str) -> Result<Option<String>, ToolError> {
    if arg.starts_with('/') {
        return Err(ModelError::PathEscape(arg.to_string()).into());
    }
    let p = cwd.join(arg);
    if !confined(root, &p) {
        return Err(ModelError::PathEscape(arg.to_string()).into());
    }
    match p.canonicalize() {
        Ok(c) if c.is_file() => Ok(c.strip_prefix(root).ok().map(|r| r.to_string_lossy().into_owned())),
        _ => Ok(None),
    }
}

fn spawn_reader<R: Read + Send + 'static>(mut r: R, keep: usize) -> JoinHandle<Vec<u8>> {
    std::thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match r.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    if kept.len() < keep {
                        let take = n.min(keep - kept.len());
                        kept.extend_from_slice(&buf[..take]);
                    }
                }
            }
        }
        kept
    })
}

/// Runs `cmd` with the working directory set to `scope` (a file scope runs
/// in the file's directory). The analyzed tree is only ever read.
pub fn shell_execute(root: &Path, cmd: &str, scope: &ObjectRef, config: &ShellConfig) -> Result<ToolInvocation, ToolError> {
    let scope = scope.renormalized()?;
    let cwd_rel = match scope.kind {
        ObjectKind::Directory => scope.path.clone(),
        _ => scope.containing_dir().to_string(),
    };
    let cwd: PathBuf = if cwd_rel.is_empty() { root.to_path_buf() } else { root.join(&cwd_rel) };
    if !confined(root, &cwd) || !cwd.is_dir() {
        return Err(ModelError::PathEscape(cwd_rel).into());
    }
    let stages = parse_pipeline(cmd)?;
    let mut files = Vec::new();
    let mut cap = config.output_cap;
    for stage in &stages {
        for p in check_stage(stage, config)? {
            if let Some(f) = check_path_arg(root, &cwd, &p)? {
                files.push(f);
            }
        }
        if stage[0] == "strings" {
            cap = cap.min(config.strings_cap);
        }
    }
    files.sort();
    files.dedup();

    let mut children: Vec<Child> = Vec::new();
    let mut err_readers = Vec::new();
    let mut prev_stdout = None;
    for (i, stage) in stages.iter().enumerate() {
        let mut c = Command::new(&stage[0]);
        c.args(&stage[1..])
            .current_dir(&cwd)
            .env_clear()
            .env("PATH", std::env::var_os("PATH").unwrap_or_default())
            .env("LC_ALL", "C")
            .stdin(match prev_stdout.take() {
                Some(out) => Stdio::from(out),
                None => Stdio::null(),
            })
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        let mut child = match c.spawn() {
            Ok(ch) => ch,
            Err(e) => {
                for mut ch in children {
                    let _ = ch.kill();
                    let _ = ch.wait();
                }
                return Err(e.into());
            }
        };
        err_readers.push(spawn_reader(child.stderr.take().unwrap(), cap));
        if i + 1 < stages.len() {
            prev_stdout = child.stdout.take().map(|s| -> std::process::ChildStdout { s });
        }
        children.push(child);
    }
    let out_reader = spawn_reader(children.last_mut().unwrap().stdout.take().unwrap(), cap + 1);

    let deadline = Instant::now() + config.timeout;
    let mut timed_out = false;
    let mut statuses = vec![None; children.len()];
    loop {
        for (i, ch) in children.iter_mut().enumerate() {
            if statuses[i].is_none() {
                if let Ok(Some(s)) = ch.try_wait() {
                    statuses[i] = Some(s);
                }
            }
        }
        if statuses.iter().all(Option::is_some) {
            break;
        }
        if Instant::now() >= deadline {
            timed_out = true;
            for ch in children.iter_mut() {
                let _ = ch.kill();
            }
            for (i, ch) in children.iter_mut().enumerate() {
                if statuses[i].is_none() {
                    statuses[i] = ch.wait().ok();
                }
            }
            break;
        }
        std::thread::sleep(Duration::from_millis(2));
    }
    let stdout = out_reader.join().unwrap_or_default();
    let mut text = String::from_utf8_lossy(&stdout).into_owned();
    let stderr: Vec<u8> = err_readers.into_iter().flat_map(|h| h.join().unwrap_or_default()).collect();
    if !stderr.is_empty() {
        text.push_str("\n[stderr]\n");
        text.push_str(&String::from_utf8_lossy(&stderr));
    }
    let (output, truncated) = cap_output(&text, cap);
    let exit_status = statuses.last().copied().flatten().and_then(|s| s.code());
    let inv = ToolInvocation {
        tool: ToolId::ShellExecute,
        parameters: serde_json::json!({ "command": cmd }),
        scope,
        timeout_ms: config.timeout.as_millis() as u64,
        output,
        truncated,
        exit_status,
        ok: !timed_out && exit_status.is_some(),
        files,
    };
    if timed_out {
        return Err(ToolError::Timeout(Box::new(inv)));
    }
    Ok(inv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tools::TRUNCATION_MARKER;

    fn fixture() -> tempfile::TempDir {
        let d = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(d.path().join("etc")).unwrap();
        std::fs::write(d.path().join("etc/passwd"), "root:x:0:0\nadmin:x:1000:1000\n").unwrap();
        std::fs::write(d.path().join("big.bin"), vec![b'A'; 100_000]).unwrap();
        d
    }

    fn root_scope() -> ObjectRef {
        ObjectRef::directory("").unwrap()
    }

    #[test]
    fn grep_finds_matching_line() {
        let d = fixture();
        let inv = shell_execute(d.path(), "grep -r 'admin' etc", &root_scope(), &ShellConfig::default()).unwrap();
        assert!(inv.output.contains("etc/passwd:admin:x:1000:1000"), "{}", inv.output);
        assert_eq!(inv.exit_status, Some(0));
    }

    #[test]
    fn non_allowlisted_commands_rejected() {
        let d = fixture();
        for cmd in ["rm -rf /", "sh -c ls", "/bin/ls", "ls; rm x", "ls > out", "cat $(ls)", "ls `x`", "ls && ls", "ls || ls"] {
            assert!(
                matches!(shell_execute(d.path(), cmd, &root_scope(), &ShellConfig::default()), Err(ToolError::ForbiddenCommand(_))),
                "{cmd}"
            );
        }
        assert!(d.path().join("big.bin").exists());
    }

    #[test]
    fn dangerous_flags_rejected() {
        let d = fixture();
        for cmd in ["find . -delete", "find . -exec cat {} +", "grep -R x .", "grep -rR x .", "file -C -m x", "find -L ."] {
            assert!(
                matches!(shell_execute(d.path(), cmd, &root_scope(), &ShellConfig::default()), Err(ToolError::ForbiddenCommand(_))),
                "{cmd}"
            );
        }
    }

    #[test]
    fn paths_outside_root_rejected() {
        let d = fixture();
        for cmd in ["cat /etc/passwd", "cat ../../etc/passwd", "ls .."] {
            assert!(
                matches!(
                    shell_execute(d.path(), cmd, &root_scope(), &ShellConfig::default()),
                    Err(ToolError::Model(ModelError::PathEscape(_)))
                ),
                "{cmd}"
            );
        }
        std::os::unix::fs::symlink("/etc/hostname", d.path().join("link")).unwrap();
        assert!(shell_execute(d.path(), "cat link", &root_scope(), &ShellConfig::default()).is_err());
    }

    #[test]
    fn output_capped() {
        let d = fixture();
        let inv = shell_execute(d.path(), "cat big.bin", &root_scope(), &ShellConfig::default()).unwrap();
        assert!(inv.truncated);
        assert!(inv.output.len() <= DEFAULT_OUTPUT_CAP + TRUNCATION_MARKER.len());
        assert_eq!(inv.files, vec!["big.bin".to_string()]);
        let s = shell_execute(d.path(), "strings big.bin", &root_scope(), &ShellConfig::default()).unwrap();
        assert!(s.output.len() <= STRINGS_OUTPUT_CAP + TRUNCATION_MARKER.len());
    }

    #[test]
    fn pipes_between_allowlisted_commands() {
        let d = fixture();
        let inv = shell_execute(d.path(), "cat etc/passwd | grep root | wc -l", &root_scope(), &ShellConfig::default()).unwrap();
        assert_eq!(inv.output.trim(), "1");
        assert!(parse_pipeline("grep 'a|b' x").unwrap().len() == 1);
    }

    #[test]
    fn file_scope_runs_in_parent_dir() {
        let d = fixture();
        let inv = shell_execute(d.path(), "ls", &ObjectRef::file("etc/passwd").unwrap(), &ShellConfig::default()).unwrap();
        assert_eq!(inv.output.trim(), "passwd");
    }

    #[test]
    fn timeout_marks_failure() {
        let d = fixture();
        let fifo = d.path().join("fifo");
        let st = std::process::Command::new("mkfifo").arg(&fifo).status();
        if !st.map(|s| s.success()).unwrap_or(false) {
            return;
        }
        let cfg = ShellConfig {
            timeout: Duration::from_millis(200),
            ..Default::default()
        };
        match shell_execute(d.path(), "cat fifo", &root_scope(), &cfg) {
            Err(ToolError::Timeout(inv)) => assert!(!inv.ok),
            other => panic!("{other:?}"),
        }
    }
}
