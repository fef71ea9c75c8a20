use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TaintConfig;
use crate::envelope::ENVELOPE_SCHEMA;
use crate::model::{AgentType, ToolId};

/// System prompts and response-format blocks for the three roles. Defaults
/// are compiled in from `prompts/`; [`RolePromptSet::load_dir`] reads an
/// operator-supplied directory with the same file names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolePromptSet {
    pub directory_prompt: String,
    pub file_prompt: String,
    pub function_prompt: String,
    pub directory_format: String,
    pub file_format: String,
    pub function_format: String,
}

const FILES: [&str; 6] = [
    "directory.md",
    "file.md",
    "function.md",
    "format_directory.md",
    "format_file.md",
    "format_function.md",
];

impl Default for RolePromptSet {
    fn default() -> Self {
        RolePromptSet {
            directory_prompt: include_str!("../../prompts/directory.md").into(),
            file_prompt: include_str!("../../prompts/file.md").into(),
            function_prompt: include_str!("../../prompts/function.md").into(),
            directory_format: include_str!("../../prompts/format_directory.md").into(),
            file_format: include_str!("../../prompts/format_file.md").into(),
            function_format: include_str!("../../prompts/format_function.md").into(),
        }
    }
}

impl RolePromptSet {
    /// Loads prompts from `dir`; files that are absent keep their defaults.
    pub fn load_dir(dir: &Path) -> std::io::Result<Self> {
        let mut set = RolePromptSet::default();
        for name in FILES {
            let p = dir.join(name);
            if !p.exists() {
                continue;
            }
            let text = std::fs::read_to_string(&p)?;
            match name {
                "directory.md" => set.directory_prompt = text,
                "file.md" => set.file_prompt = text,
                "function.md" => set.function_prompt = text,
                "format_directory.md" => set.directory_format = text,
                "format_file.md" => set.file_format = text,
                _ => set.function_format = text,
            }
        }
        Ok(set)
    }

    /// The full system prompt for a role with its tool list substituted.
    pub fn system_prompt(&self, agent_type: AgentType, tools: &[ToolId], taint: &TaintConfig) -> String {
        let (prompt, format, placeholder) = match agent_type {
            AgentType::Directory => (&self.directory_prompt, &self.directory_format, "{DIRECTORY_RESPONSE_FORMAT_BLOCK}"),
            AgentType::File => (&self.file_prompt, &self.file_format, "{FILE_RESPONSE_FORMAT_BLOCK}"),
            AgentType::Function => (&self.function_prompt, &self.function_format, "{FUNCTION_RESPONSE_FORMAT_BLOCK}"),
        };
        let tool_list: Vec<String> = tools.iter().map(|t| format!("- {}: {}", t, tool_description(*t))).collect();
        let block = format
            .replace("{ENVELOPE_SCHEMA}", ENVELOPE_SCHEMA.trim())
            .replace("{TOOLS}", &tool_list.join("\n"))
            .replace("{SINKS}", &taint.sinks.join(", "))
            .replace("{SOURCES}", &taint.sources.join(", "));
        if prompt.contains(placeholder) {
            prompt.replace(placeholder, block.trim_end())
        } else {
            format!("{}\n\n{}", prompt.trim_end(), block.trim_end())
        }
    }
}

/// One-line usage text for a tool, including its `action_input` shape.
pub fn tool_description(tool: ToolId) -> &'static str {
    match tool {
        ToolId::GetContext => r#"view a directory listing or file summary. Input: {"path": "<path>"}"#,
        ToolId::ShellExecute => {
            r#"run a read-only shell command (ls, file, grep, find, cat, head, strings, stat, wc, readlink, md5sum; pipes allowed) in your current directory. Input: {"command": "<command>"}"#
        }
        ToolId::BinaryAnalysis => {
            r#"run a disassembler command (e.g. afl, pdg @ main, axt @ sym.imp.system) on a binary. Input: {"command": "<command>", "target": "<binary path, defaults to yours>"}"#
        }
        ToolId::Delegation => {
            r#"hand one subtask to a new assistant and wait for its report. Input: {"kind": "directory|file|function", "path": "<path>", "function": "<name>", "address": <int>, "goal": "<task>"}"#
        }
        ToolId::ParallelDelegation => {
            r#"hand several independent subtasks to assistants running in parallel. Input: {"subtasks": [<subtask as for Delegation>, ...]}"#
        }
        ToolId::Store => r#"commit one evidence-backed finding to the knowledge hub. Input: <finding>"#,
        ToolId::Query => {
            r#"look up stored findings. Input: {"link_ids": [..], "semantic_type": "<type>", "path_prefix": "<path>", "text": [..]}"#
        }
        ToolId::Explore => {
            r#"list stored findings that may correlate with a draft. Input: {"path": "<path>", "link_ids": [..]}"#
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::roles::ToolRegistry;

    #[test]
    fn prompts_name_tools_and_finish_contract() {
        let set = RolePromptSet::default();
        let reg = ToolRegistry::default();
        for t in [AgentType::Directory, AgentType::File, AgentType::Function] {
            let tools = reg.tools_for(t);
            let p = set.system_prompt(t, &tools, &TaintConfig::default());
            for tool in &tools {
                assert!(p.contains(&format!("- {tool}:")), "{t} prompt lacks {tool}");
            }
            assert!(p.contains("\"finish\""));
            assert!(p.contains("\"action_input\""));
            assert!(!p.contains("RESPONSE_FORMAT_BLOCK"));
        }
        let dir = set.system_prompt(AgentType::Directory, &reg.tools_for(AgentType::Directory), &TaintConfig::default());
        assert!(!dir.contains("- Store:"));
    }

    #[test]
    fn load_dir_overrides_present_files() {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("file.md"), "custom {FILE_RESPONSE_FORMAT_BLOCK}").unwrap();
        let set = RolePromptSet::load_dir(d.path()).unwrap();
        assert_eq!(set.file_prompt, "custom {FILE_RESPONSE_FORMAT_BLOCK}");
        assert_eq!(set.directory_prompt, RolePromptSet::default().directory_prompt);
    }
}
