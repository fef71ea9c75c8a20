//! Task presets, run configuration, report emission and cross-run
//! analytics.

mod analytics;
mod config;
mod presets;
mod report;

use std::path::{Path, PathBuf};

use thiserror::Error;

pub use analytics::{
    alert_keys, cdf_csv, jaccard, metrics_cdf, stability_suite, CdfMetric, CdfRow, MeanStd, StabilityEntry,
    StabilityReport,
};
pub use config::{BackendChoice, BackendConfig, RunConfig, ToolsConfig};
pub use presets::TaskPreset;
pub use report::{run_task, AgentTally, Alert, RunMetadata, RunReport, PKH_SLICE_FILE, REPORT_FILE};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("root agent failed: {explanation}")]
    RootFailure { explanation: String, report: Box<RunReport> },
    #[error(transparent)]
    Engine(#[from] crate::engine::EngineError),
    #[error(transparent)]
    Hub(#[from] crate::hub::HubError),
    #[error(transparent)]
    Tool(#[from] crate::tools::ToolError),
}

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
