use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::engine::{RunOptions, RunSetup};
use crate::hub::KnowledgeHub;
use crate::llm::{BackendHandle, RemoteBackend, RemoteConfig, ScriptedPolicy};
use crate::model::Budget;
use crate::roles::{RolePromptSet, TaintConfig, ToolRegistry};
use crate::tools::{
    BinaryBackend, BinaryBackendKind, MockFixtures, ShellConfig, ToolSuite, DEFAULT_ALLOWLIST, DEFAULT_OUTPUT_CAP,
    STRINGS_OUTPUT_CAP,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendChoice {
    Scripted,
    Remote,
}

impl std::str::FromStr for BackendChoice {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "scripted" => Ok(BackendChoice::Scripted),
            "remote" => Ok(BackendChoice::Remote),
            other => Err(HarnessError::Config(format!("unknown backend {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendChoice,
    /// Scripted policy file (JSON).
    pub script: Option<PathBuf>,
    pub seed: u64,
    pub temperature: f64,
    pub remote: RemoteConfig,
}

impl Default for BackendConfig {
    fn default() -> Self {
        BackendConfig {
            kind: BackendChoice::Scripted,
            script: None,
            seed: 0,
            temperature: 0.0,
            remote: RemoteConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolsConfig {
    pub allowlist: Vec<String>,
    pub timeout_secs: f64,
    pub output_cap: usize,
    pub strings_cap: usize,
    pub max_subprocesses: usize,
    pub binary_backend: BinaryBackendKind,
    /// Directory of mock fixture JSON files.
    pub fixtures: Option<PathBuf>,
    /// Disassembler executable for the external backend.
    pub disassembler: Option<PathBuf>,
}

impl Default for ToolsConfig {
    fn default() -> Self {
        ToolsConfig {
            allowlist: DEFAULT_ALLOWLIST.iter().map(|s| s.to_string()).collect(),
            timeout_secs: 30.0,
            output_cap: DEFAULT_OUTPUT_CAP,
            strings_cap: STRINGS_OUTPUT_CAP,
            max_subprocesses: 8,
            binary_backend: BinaryBackendKind::Mock,
            fixtures: None,
            disassembler: None,
        }
    }
}

/// Everything that parameterizes a run. Loaded from TOML, then overridden
/// by environment variables, then by command-line flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub budget: Budget,
    pub backend: BackendConfig,
    pub tools: ToolsConfig,
    pub taint: TaintConfig,
    pub registry: Option<ToolRegistry>,
    pub prompts_dir: Option<PathBuf>,
    /// Knowledge hub directory. Defaults to `<out>/pkh`.
    pub pkh_dir: Option<PathBuf>,
    pub fresh_pkh: bool,
    pub single_threaded: bool,
    pub canonical: bool,
    pub result_cap: usize,
    pub max_parse_retries: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        let opts = RunOptions::default();
        RunConfig {
            budget: Budget::default(),
            backend: BackendConfig::default(),
            tools: ToolsConfig::default(),
            taint: TaintConfig::default(),
            registry: None,
            prompts_dir: None,
            pkh_dir: None,
            fresh_pkh: false,
            single_threaded: false,
            canonical: false,
            result_cap: opts.result_cap,
            max_parse_retries: opts.max_parse_retries,
        }
    }
}

fn rebase(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(x) = p {
        if x.is_relative() {
            *x = base.join(&*x);
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    /// Loads a config file; relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        rebase(base, &mut cfg.backend.script);
        rebase(base, &mut cfg.tools.fixtures);
        rebase(base, &mut cfg.tools.disassembler);
        rebase(base, &mut cfg.prompts_dir);
        rebase(base, &mut cfg.pkh_dir);
        Ok(cfg)
    }

    /// Applies `TOA_*` overrides read through `lookup`.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<(), HarnessError> {
        let bad = |k: &str, v: &str| HarnessError::Config(format!("{k}={v:?} is invalid"));
        let flag = |v: &str| matches!(v.to_ascii_lowercase().as_str(), "1" | "true" | "yes");
        if let Some(v) = lookup("TOA_BACKEND") {
            self.backend.kind = v.parse()?;
        }
        if let Some(v) = lookup("TOA_SCRIPT") {
            self.backend.script = Some(v.into());
        }
        if let Some(v) = lookup("TOA_SEED") {
            self.backend.seed = v.parse().map_err(|_| bad("TOA_SEED", &v))?;
        }
        if let Some(v) = lookup("TOA_TEMPERATURE") {
            self.backend.temperature = v.parse().map_err(|_| bad("TOA_TEMPERATURE", &v))?;
        }
        if let Some(v) = lookup("TOA_PKH_DIR") {
            self.pkh_dir = Some(v.into());
        }
        if let Some(v) = lookup("TOA_PROMPTS_DIR") {
            self.prompts_dir = Some(v.into());
        }
        if let Some(v) = lookup("TOA_FIXTURES") {
            self.tools.fixtures = Some(v.into());
        }
        if let Some(v) = lookup("TOA_FRESH_PKH") {
            self.fresh_pkh = flag(&v);
        }
        if let Some(v) = lookup("TOA_SINGLE_THREADED") {
            self.single_threaded = flag(&v);
        }
        let steps = lookup("TOA_MAX_STEPS");
        let depth = lookup("TOA_MAX_DEPTH");
        if steps.is_some() || depth.is_some() {
            let s = match &steps {
                Some(v) => v.parse().map_err(|_| bad("TOA_MAX_STEPS", v))?,
                None => self.budget.max_steps_per_agent(),
            };
            let d = match &depth {
                Some(v) => v.parse().map_err(|_| bad("TOA_MAX_DEPTH", v))?,
                None => self.budget.max_depth(),
            };
            self.budget = self.with_budget_counts(s, d)?;
        }
        Ok(())
    }

    pub fn with_budget_counts(&self, steps: u32, depth: u32) -> Result<Budget, HarnessError> {
        let b = Budget::new(steps, depth, self.budget.max_parallel_children(), self.budget.max_llm_retries())
            .map_err(|e| HarnessError::Config(e.to_string()))?;
        Ok(match self.budget.wall_clock_limit() {
            Some(l) => b.with_wall_clock(l).map_err(|e| HarnessError::Config(e.to_string()))?,
            None => b,
        })
    }

    pub fn tool_suite(&self, firmware_root: &Path) -> Result<ToolSuite, HarnessError> {
        let shell = ShellConfig {
            allowlist: self.tools.allowlist.clone(),
            timeout: Duration::from_secs_f64(self.tools.timeout_secs.max(0.001)),
            output_cap: self.tools.output_cap,
            strings_cap: self.tools.strings_cap,
        };
        let binary = match self.tools.binary_backend {
            BinaryBackendKind::Mock => match &self.tools.fixtures {
                Some(dir) => BinaryBackend::mock(MockFixtures::load_dir(dir)?),
                None => BinaryBackend::mock(MockFixtures::new()),
            },
            BinaryBackendKind::ExternalDisassembler => match &self.tools.disassembler {
                Some(p) => BinaryBackend::external(p),
                None => BinaryBackend::external_from_env(),
            },
        };
        let mut suite = ToolSuite::new(firmware_root, shell, binary, self.tools.max_subprocesses)?;
        suite.output_cap = self.tools.output_cap;
        Ok(suite)
    }

    pub fn backend_handle(&self) -> Result<BackendHandle, HarnessError> {
        match self.backend.kind {
            BackendChoice::Scripted => {
                let script = self
                    .backend
                    .script
                    .as_ref()
                    .ok_or_else(|| HarnessError::Config("the scripted backend needs a script file".into()))?;
                let policy = ScriptedPolicy::load(script).map_err(|e| HarnessError::io(script, e))?;
                Ok(BackendHandle::scripted(policy, self.backend.seed))
            }
            BackendChoice::Remote => {
                let b = RemoteBackend::new(self.backend.remote.clone()).map_err(|e| HarnessError::Config(e.to_string()))?;
                BackendHandle::new(Arc::new(b), self.backend.temperature, self.backend.seed)
                    .map_err(|e| HarnessError::Config(e.to_string()))
            }
        }
    }

    /// Assembles a [`RunSetup`] for one run. `default_pkh` is used when the
    /// config names no hub directory.
    pub fn run_setup(&self, firmware_root: &Path, default_pkh: &Path, run_id: &str) -> Result<RunSetup, HarnessError> {
        let tools = self.tool_suite(firmware_root)?;
        let pkh_dir = self.pkh_dir.clone().unwrap_or_else(|| default_pkh.to_path_buf());
        let hub = if self.fresh_pkh {
            KnowledgeHub::open_fresh(&pkh_dir)?
        } else {
            KnowledgeHub::open(&pkh_dir)?
        };
        let prompts = match &self.prompts_dir {
            Some(d) => RolePromptSet::load_dir(d).map_err(|e| HarnessError::io(d, e))?,
            None => RolePromptSet::default(),
        };
        Ok(RunSetup {
            tools,
            hub,
            prompts,
            registry: self.registry.clone().unwrap_or_default(),
            taint: self.taint.clone(),
            options: RunOptions {
                run_id: run_id.to_string(),
                single_threaded: self.single_threaded,
                result_cap: self.result_cap,
                max_parse_retries: self.max_parse_retries,
            },
        })
    }
}

#[cfg(test)]
mod tests {
    use std::collections::HashMap;

    use super::*;

    #[test]
    fn toml_round_trip_and_defaults() {
        let cfg = RunConfig::from_toml(
            r#"
            fresh_pkh = true
            [budget]
            max_depth = 3
            [backend]
            kind = "scripted"
            seed = 9
            [taint]
            sinks = ["system"]
            "#,
        )
        .unwrap();
        assert_eq!(cfg.budget.max_depth(), 3);
        assert_eq!(cfg.budget.max_steps_per_agent(), 30);
        assert_eq!(cfg.backend.seed, 9);
        assert!(cfg.fresh_pkh);
        assert_eq!(cfg.taint.sinks, ["system"]);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[budget]\nmax_steps_per_agent = 0").is_err());
    }

    #[test]
    fn env_overrides_file() {
        let mut cfg = RunConfig::from_toml("[backend]\nseed = 1\n[budget]\nmax_depth = 2").unwrap();
        let env: HashMap<&str, &str> = HashMap::from([("TOA_SEED", "5"), ("TOA_MAX_STEPS", "12")]);
        cfg.apply_env(|k| env.get(k).map(|v| v.to_string())).unwrap();
        assert_eq!(cfg.backend.seed, 5);
        assert_eq!(cfg.budget.max_steps_per_agent(), 12);
        assert_eq!(cfg.budget.max_depth(), 2);
        assert!(cfg.apply_env(|k| (k == "TOA_SEED").then(|| "x".to_string())).is_err());
    }

    #[test]
    fn hub_tools_rejected_outside_file_role_in_config() {
        assert!(RunConfig::from_toml("[registry]\ndirectory = [\"Store\"]").is_err());
        let cfg = RunConfig::from_toml("[registry]\nfile = [\"Store\", \"GetContext\"]").unwrap();
        assert!(cfg.registry.is_some());
    }
}
