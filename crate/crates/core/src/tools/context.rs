use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use super::{cap_output, ToolError};
use crate::model::{confined, ModelError, ObjectKind, ObjectRef};

/// Renders a view of `scope`: an entry listing for directories, a type
/// summary plus bounded head excerpt for files and functions' binaries.
pub fn get_context(root: &Path, scope: &ObjectRef, cap: usize) -> Result<String, ToolError> {
    let scope = scope.renormalized()?;
    let abs = scope.absolute(root);
    if !confined(root, &abs) {
        return Err(ModelError::PathEscape(scope.path.clone()).into());
    }
    let meta = std::fs::metadata(&abs).map_err(|_| ModelError::NotFound(scope.path.clone()))?;
    let shown = if scope.path.is_empty() { "/".to_string() } else { format!("/{}", scope.path) };
    let text = if meta.is_dir() {
        if scope.kind != ObjectKind::Directory {
            return Err(ToolError::NotAFile(scope.path.clone()));
        }
        list_directory(&abs, &shown)?
    } else {
        describe_file(&abs, &shown, meta.len(), cap)?
    };
    Ok(cap_output(&text, cap).0)
}

fn list_directory(abs: &Path, shown: &str) -> Result<String, ToolError> {
    let mut entries: Vec<(String, String)> = Vec::new();
    for entry in std::fs::read_dir(abs)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        let ft = entry.file_type()?;
        let desc = if ft.is_symlink() {
            let target = std::fs::read_link(entry.path()).map(|t| t.display().to_string()).unwrap_or_default();
            format!("symlink\t-> {target}")
        } else if ft.is_dir() {
            "dir\t-".to_string()
        } else {
            let len = entry.metadata().map(|m| m.len()).unwrap_or(0);
            format!("file\t{len}")
        };
        entries.push((name, desc));
    }
    entries.sort();
    let mut out = format!("Directory: {shown}\nEntries: {}\n", entries.len());
    for (name, desc) in entries {
        let _ = writeln!(out, "{desc}\t{name}");
    }
    Ok(out)
}

fn describe_file(abs: &Path, shown: &str, len: u64, cap: usize) -> Result<String, ToolError> {
    let mut head = Vec::with_capacity(cap.min(len as usize) + 1);
    std::fs::File::open(abs)?.take(cap as u64 + 1).read_to_end(&mut head)?;
    let kind = sniff(&head);
    let excerpt: String = if kind == "text" || kind == "script" {
        String::from_utf8_lossy(&head).into_owned()
    } else {
        head.iter()
            .map(|&b| if b.is_ascii_graphic() || b == b' ' || b == b'\n' { b as char } else { '.' })
            .collect()
    };
    let mut out = format!("File: {shown}\nSize: {len} bytes\nType: {kind}\n--- head ---\n");
    out.push_str(&excerpt);
    Ok(out)
}

fn sniff(head: &[u8]) -> &'static str {
    if head.starts_with(b"\x7fELF") {
        "elf"
    } else if head.starts_with(b"#!") {
        "script"
    } else if head.iter().take(8192).any(|&b| b == 0) {
        "data"
    } else if std::str::from_utf8(&head[..head.len().min(8192)]).is_ok() {
        "text"
    } else {
        "data"
    }
}
