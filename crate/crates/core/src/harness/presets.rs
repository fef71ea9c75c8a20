use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::model::SemanticType;

/// A named analysis task: the user prompt plus the kind of alert it is
/// expected to produce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskPreset {
    pub id: String,
    pub prompt: String,
    pub semantic_type: SemanticType,
}

const BUILTIN: [&str; 5] = [
    include_str!("../../presets/T1.toml"),
    include_str!("../../presets/T2.toml"),
    include_str!("../../presets/T3.toml"),
    include_str!("../../presets/T4.toml"),
    include_str!("../../presets/T5.toml"),
];

impl TaskPreset {
    pub fn builtin_all() -> Vec<TaskPreset> {
        BUILTIN
            .iter()
            .map(|s| toml::from_str(s).expect("built-in presets parse"))
            .collect()
    }

    pub fn builtin(id: &str) -> Option<TaskPreset> {
        Self::builtin_all().into_iter().find(|p| p.id.eq_ignore_ascii_case(id))
    }

    /// Reads a preset file. TOML files use the built-in layout; any other
    /// file is taken as a bare prompt named after its stem.
    pub fn from_file(path: &Path) -> Result<TaskPreset, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        if path.extension().is_some_and(|e| e == "toml") {
            return toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())));
        }
        let prompt = text.trim().to_string();
        if prompt.is_empty() {
            return Err(HarnessError::Config(format!("{}: empty prompt", path.display())));
        }
        Ok(TaskPreset {
            id: path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "custom".into()),
            prompt,
            semantic_type: SemanticType::Other,
        })
    }

    /// A built-in id such as `T3`, or a path to a preset file.
    pub fn resolve(spec: &str) -> Result<TaskPreset, HarnessError> {
        match Self::builtin(spec) {
            Some(p) => Ok(p),
            None => Self::from_file(Path::new(spec)),
        }
    }
}
