//! The three agent roles: prompts, per-role tool sets, the growth
//! blueprint, final-report checks and the ReAct loop itself.

mod agent;
mod prompts;
mod report;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AgentType, TaskSpec, ToolId};

pub use agent::{dispatch_action, run_agent, AgentState, DispatchOutcome};
pub use prompts::{tool_description, RolePromptSet};
pub use report::{check_trace, classify_sink, finalize_report, FinalizeCtx};

/// Permitted tools per agent type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<AgentType, BTreeSet<ToolId>>", into = "BTreeMap<AgentType, BTreeSet<ToolId>>")]
pub struct ToolRegistry {
    tools: BTreeMap<AgentType, BTreeSet<ToolId>>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum RegistryError {
    #[error("{tool} is a knowledge hub tool and may only be given to file agents")]
    HubToolOutsideFileRole { tool: ToolId },
}

impl ToolRegistry {
    pub fn new(tools: BTreeMap<AgentType, BTreeSet<ToolId>>) -> Result<Self, RegistryError> {
        for (t, set) in &tools {
            if *t != AgentType::File {
                if let Some(tool) = set.iter().find(|x| x.is_hub()) {
                    return Err(RegistryError::HubToolOutsideFileRole { tool: *tool });
                }
            }
        }
        Ok(ToolRegistry { tools })
    }

    pub fn tools_for(&self, agent_type: AgentType) -> Vec<ToolId> {
        self.tools.get(&agent_type).map(|s| s.iter().copied().collect()).unwrap_or_default()
    }

    pub fn permits(&self, agent_type: AgentType, tool: ToolId) -> bool {
        self.tools.get(&agent_type).is_some_and(|s| s.contains(&tool))
    }
}

impl Default for ToolRegistry {
    fn default() -> Self {
        use ToolId::*;
        let tools = BTreeMap::from([
            (
                AgentType::Directory,
                BTreeSet::from([GetContext, ShellExecute, Delegation, ParallelDelegation]),
            ),
            (
                AgentType::File,
                BTreeSet::from([
                    GetContext,
                    ShellExecute,
                    BinaryAnalysis,
                    Delegation,
                    ParallelDelegation,
                    Store,
                    Query,
                    Explore,
                ]),
            ),
            (
                AgentType::Function,
                BTreeSet::from([BinaryAnalysis, GetContext, Delegation, ParallelDelegation]),
            ),
        ]);
        ToolRegistry { tools }
    }
}

impl TryFrom<BTreeMap<AgentType, BTreeSet<ToolId>>> for ToolRegistry {
    type Error = RegistryError;

    fn try_from(m: BTreeMap<AgentType, BTreeSet<ToolId>>) -> Result<Self, Self::Error> {
        ToolRegistry::new(m)
    }
}

impl From<ToolRegistry> for BTreeMap<AgentType, BTreeSet<ToolId>> {
    fn from(r: ToolRegistry) -> Self {
        r.tools
    }
}

/// Longest run of consecutive file agents allowed on one root path.
pub const MAX_FILE_CHAIN: usize = 2;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
#[error("blueprint violation: {parent} agent may not delegate to a {child} agent{detail}")]
pub struct BlueprintViolation {
    pub parent: AgentType,
    pub child: AgentType,
    pub detail: String,
}

/// Checks a new edge against the growth blueprint. `lineage` lists agent
/// types from the root down to the requesting parent.
pub fn enforce_growth_blueprint(lineage: &[AgentType], child: &TaskSpec) -> Result<(), BlueprintViolation> {
    let Some(&parent) = lineage.last() else {
        return Ok(());
    };
    let child_type = child.object.kind;
    let violation = |detail: &str| BlueprintViolation {
        parent,
        child: child_type,
        detail: detail.to_string(),
    };
    match (parent, child_type) {
        (AgentType::Directory, AgentType::Directory | AgentType::File) => Ok(()),
        (AgentType::File, AgentType::Function) => Ok(()),
        (AgentType::File, AgentType::File) => {
            let chain = lineage.iter().rev().take_while(|t| **t == AgentType::File).count();
            if chain + 1 > MAX_FILE_CHAIN {
                Err(violation(" (file decomposition is not recursive)"))
            } else {
                Ok(())
            }
        }
        (AgentType::Function, AgentType::Function) => Ok(()),
        _ => Err(violation("")),
    }
}

/// Sink and source vocabularies for function-level taint traces.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaintConfig {
    pub sinks: Vec<String>,
    pub sources: Vec<String>,
}

impl Default for TaintConfig {
    fn default() -> Self {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect();
        TaintConfig {
            sinks: s(&[
                "system", "popen", "execl", "execlp", "execle", "execv", "execvp", "execve", "strcpy", "sprintf",
            ]),
            sources: s(&[
                "recv",
                "recvfrom",
                "read",
                "getenv",
                "nvram_get",
                "nvram_safe_get",
                "websGetVar",
                "get_cgi",
                "cgi_get",
                "httpGetEnv",
                "find_var",
            ]),
        }
    }
}

/// Strips common disassembler decorations: `sym.imp.system` and `system()`
/// both become `system`.
pub fn bare_symbol(identifier: &str) -> &str {
    let s = identifier.trim();
    let s = s.strip_suffix("()").unwrap_or(s);
    let s = s.rsplit('.').next().unwrap_or(s);
    s.trim_start_matches('_')
}

impl TaintConfig {
    pub fn is_sink(&self, identifier: &str) -> bool {
        let b = bare_symbol(identifier);
        self.sinks.iter().any(|s| s == b)
    }

    pub fn is_source(&self, identifier: &str) -> bool {
        let b = bare_symbol(identifier);
        self.sources.iter().any(|s| s == b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{FunctionLocator, ObjectRef};

    fn task(o: ObjectRef) -> TaskSpec {
        TaskSpec::new(o, "g", "0").unwrap()
    }

    #[test]
    fn hub_tools_only_for_file_agents() {
        let r = ToolRegistry::default();
        for t in [AgentType::Directory, AgentType::Function] {
            assert!(r.tools_for(t).iter().all(|x| !x.is_hub()));
        }
        assert!(r.permits(AgentType::File, ToolId::Store));
        let bad = BTreeMap::from([(AgentType::Function, BTreeSet::from([ToolId::Query]))]);
        assert!(ToolRegistry::new(bad).is_err());
    }

    #[test]
    fn blueprint_edges() {
        use crate::model::ObjectKind::*;
        let dir = task(ObjectRef::directory("etc").unwrap());
        let file = task(ObjectRef::file("etc/x").unwrap());
        let func = task(ObjectRef::function("bin/a", FunctionLocator::named("main")).unwrap());
        assert!(enforce_growth_blueprint(&[Directory], &dir).is_ok());
        assert!(enforce_growth_blueprint(&[Directory], &file).is_ok());
        assert!(enforce_growth_blueprint(&[Directory], &func).is_err());
        assert!(enforce_growth_blueprint(&[Directory, File], &func).is_ok());
        assert!(enforce_growth_blueprint(&[Directory, File], &dir).is_err());
        assert!(enforce_growth_blueprint(&[Directory, File, Function], &func).is_ok());
        assert!(enforce_growth_blueprint(&[Directory, File, Function], &dir).is_err());
        assert!(enforce_growth_blueprint(&[Directory, File, Function], &file).is_err());
        assert!(enforce_growth_blueprint(&[Directory, File], &file).is_ok());
        assert!(enforce_growth_blueprint(&[Directory, File, File], &file).is_err());
        assert!(enforce_growth_blueprint(&[Directory, File, File], &func).is_ok());
    }

    #[test]
    fn sink_matching_strips_decorations() {
        let c = TaintConfig::default();
        for s in ["system", "sym.imp.system", "system()", "_system"] {
            assert!(c.is_sink(s), "{s}");
        }
        assert!(!c.is_sink("printf"));
        assert!(c.is_source("sym.imp.getenv"));
    }
}
