//! Object references: the firmware element an agent is anchored to.

use std::fmt;
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::ModelError;

/// The three kinds of object an agent can be anchored to. Agent types use
/// the same enumeration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    Directory,
    File,
    Function,
}

impl ObjectKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ObjectKind::Directory => "directory",
            ObjectKind::File => "file",
            ObjectKind::Function => "function",
        }
    }
}

impl fmt::Display for ObjectKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Locates a function inside a binary, by name, address, or both.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FunctionLocator {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub address: Option<u64>,
}

impl FunctionLocator {
    pub fn named(name: impl Into<String>) -> Self {
        Self {
            name: Some(name.into()),
            address: None,
        }
    }

    /// Canonical label: the name when present, otherwise the hex address.
    pub fn label(&self) -> String {
        match (&self.name, self.address) {
            (Some(n), _) => n.clone(),
            (None, Some(a)) => format!("{a:#x}"),
            (None, None) => String::new(),
        }
    }
}

/// A root-relative reference to a directory, file, or function.
///
/// `path` is always normalized and relative to the firmware root; the root
/// itself is the empty path. For functions, `path` names the containing
/// binary and `function` carries the locator.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ObjectRef {
    pub kind: ObjectKind,
    pub path: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub function: Option<FunctionLocator>,
}

impl ObjectRef {
    pub fn directory(path: impl AsRef<str>) -> Result<Self, ModelError> {
        Ok(Self {
            kind: ObjectKind::Directory,
            path: normalize_relative(path.as_ref())?,
            function: None,
        })
    }

    pub fn file(path: impl AsRef<str>) -> Result<Self, ModelError> {
        Ok(Self {
            kind: ObjectKind::File,
            path: normalize_relative(path.as_ref())?,
            function: None,
        })
    }

    /// Function objects are only constructible through an explicit locator.
    pub fn function(binary: impl AsRef<str>, locator: FunctionLocator) -> Result<Self, ModelError> {
        if locator.name.as_deref().map_or(true, |n| n.trim().is_empty()) && locator.address.is_none() {
            return Err(ModelError::InvalidObject(
                "function locator needs a name or an address".into(),
            ));
        }
        Ok(Self {
            kind: ObjectKind::Function,
            path: normalize_relative(binary.as_ref())?,
            function: Some(locator),
        })
    }

    /// Checks the `function present <=> kind = function` invariant and path
    /// normalization. Used on values that arrive through deserialization.
    pub fn validate(&self) -> Result<(), ModelError> {
        match (self.kind, &self.function) {
            (ObjectKind::Function, None) => {
                return Err(ModelError::InvalidObject("function object without locator".into()))
            }
            (ObjectKind::Directory | ObjectKind::File, Some(_)) => {
                return Err(ModelError::InvalidObject("locator on non-function object".into()))
            }
            _ => {}
        }
        if normalize_relative(&self.path)? != self.path {
            return Err(ModelError::InvalidObject(format!("path {:?} is not normalized", self.path)));
        }
        Ok(())
    }

    /// Re-normalizes the path lexically (no filesystem access).
    pub fn renormalized(&self) -> Result<Self, ModelError> {
        let mut out = self.clone();
        out.path = normalize_relative(&self.path)?;
        out.validate()?;
        Ok(out)
    }

    /// Parent directory of the object's path ("" for top-level entries).
    pub fn parent_dir(&self) -> &str {
        match self.kind {
            ObjectKind::Directory => parent_of(&self.path),
            ObjectKind::File | ObjectKind::Function => parent_of(&self.path),
        }
    }

    /// Directory that contains (or is) this object.
    pub fn containing_dir(&self) -> &str {
        match self.kind {
            ObjectKind::Directory => &self.path,
            _ => parent_of(&self.path),
        }
    }

    /// Stable textual key used for equality checks and logs.
    pub fn key(&self) -> String {
        match &self.function {
            Some(loc) => format!("{}:{}", self.path, loc.label()),
            None => self.path.clone(),
        }
    }

    pub fn absolute(&self, root: &Path) -> PathBuf {
        if self.path.is_empty() {
            root.to_path_buf()
        } else {
            root.join(&self.path)
        }
    }

    /// True when `self` lies at or below `scope` in the path hierarchy.
    pub fn is_within(&self, scope: &str) -> bool {
        path_is_within(&self.path, scope)
    }
}

impl fmt::Display for ObjectRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let shown = if self.path.is_empty() { "/" } else { &self.path };
        match &self.function {
            Some(loc) => write!(f, "{} {}@{}", self.kind, loc.label(), shown),
            None => write!(f, "{} {}", self.kind, shown),
        }
    }
}

fn parent_of(path: &str) -> &str {
    match path.rfind('/') {
        Some(i) => &path[..i],
        None => "",
    }
}

pub(crate) fn path_is_within(path: &str, scope: &str) -> bool {
    scope.is_empty() || path == scope || (path.starts_with(scope) && path.as_bytes().get(scope.len()) == Some(&b'/'))
}

/// Lexically normalizes a root-relative path: drops `.` and empty segments,
/// resolves `..`, strips a leading `/`. Fails when `..` climbs above the root.
pub fn normalize_relative(raw: &str) -> Result<String, ModelError> {
    let mut parts: Vec<&str> = Vec::new();
    for seg in raw.trim().split('/') {
        match seg {
            "" | "." => {}
            ".." => {
                if parts.pop().is_none() {
                    return Err(ModelError::PathEscape(raw.to_string()));
                }
            }
            s => parts.push(s),
        }
    }
    Ok(parts.join("/"))
}

/// Resolves `raw_path` against the firmware `root`, confines it to the root
/// and infers directory/file kind from the filesystem.
///
/// Symlinks whose target leaves the root are rejected as escapes.
pub fn normalize_object_ref(raw_path: &str, root: &Path) -> Result<ObjectRef, ModelError> {
    if !root.is_dir() {
        return Err(ModelError::RootNotDirectory(root.display().to_string()));
    }
    let rel = normalize_relative(raw_path)?;
    let abs = if rel.is_empty() { root.to_path_buf() } else { root.join(&rel) };
    let meta = std::fs::symlink_metadata(&abs).map_err(|_| ModelError::NotFound(rel.clone()))?;
    let is_dir = if meta.file_type().is_symlink() {
        let canon_root = root.canonicalize().map_err(|_| ModelError::NotFound(rel.clone()))?;
        let target = abs.canonicalize().map_err(|_| ModelError::NotFound(rel.clone()))?;
        if !target.starts_with(&canon_root) {
            return Err(ModelError::PathEscape(raw_path.to_string()));
        }
        target.is_dir()
    } else {
        meta.is_dir()
    };
    Ok(ObjectRef {
        kind: if is_dir { ObjectKind::Directory } else { ObjectKind::File },
        path: rel,
        function: None,
    })
}

/// Joins a root-relative `base` with a relative `child`, confining the result.
pub fn join_relative(base: &str, child: &str) -> Result<String, ModelError> {
    if child.starts_with('/') {
        return Err(ModelError::PathEscape(child.to_string()));
    }
    let joined = if base.is_empty() { child.to_string() } else { format!("{base}/{child}") };
    normalize_relative(&joined)
}

/// Returns true when the absolute path `p` is inside `root` after resolving
/// symlinks. Non-existent paths are checked lexically.
pub(crate) fn confined(root: &Path, p: &Path) -> bool {
    let Ok(canon_root) = root.canonicalize() else { return false };
    match p.canonicalize() {
        Ok(c) => c.starts_with(&canon_root),
        Err(_) => {
            let mut depth: i64 = 0;
            let rel = match p.strip_prefix(root) {
                Ok(r) => r,
                Err(_) => return false,
            };
            for c in rel.components() {
                match c {
                    Component::ParentDir => depth -= 1,
                    Component::Normal(_) => depth += 1,
                    Component::CurDir => {}
                    _ => return false,
                }
                if depth < 0 {
                    return false;
                }
            }
            true
        }
    }
}
