use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use toa_core::harness::{
    cdf_csv, metrics_cdf, run_task, stability_suite, BackendChoice, CdfMetric, HarnessError, RunConfig, RunReport,
    TaskPreset, REPORT_FILE,
};

/// Exit status when the root agent reports failure. Artifacts are still
/// written in that case.
const ROOT_FAILURE: u8 = 2;

#[derive(Parser, Debug)]
#[command(name = "toa", version, about = "Recursive multi-agent firmware analysis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one task over a firmware root.
    Run {
        #[arg(long)]
        firmware: PathBuf,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Repeat a task R times per firmware root and compare the runs.
    Stability {
        /// May be given more than once.
        #[arg(long, required = true)]
        firmware: Vec<PathBuf>,
        #[arg(long, default_value_t = 10)]
        runs: usize,
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Empirical CDF of a run metric, as CSV.
    Cdf {
        #[arg(long)]
        metric: String,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// report.json files, or directories searched recursively for them.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
    /// List the built-in task presets.
    Tasks,
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// Built-in preset id (T1..T5) or a prompt file.
    #[arg(long)]
    task: String,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    out: PathBuf,
    /// Scripted policy file.
    #[arg(long)]
    script: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pkh_dir: Option<PathBuf>,
    #[arg(long)]
    max_steps: Option<u32>,
    #[arg(long)]
    max_depth: Option<u32>,
    #[arg(long)]
    fresh_pkh: bool,
    #[arg(long)]
    single_threaded: bool,
    #[arg(long)]
    canonical: bool,
}

impl CommonArgs {
    /// Config file, then `TOA_*` variables, then flags.
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        if let Some(b) = &self.backend {
            cfg.backend.kind = b.parse::<BackendChoice>()?;
        }
        if let Some(s) = &self.script {
            cfg.backend.script = Some(s.clone());
        }
        if let Some(s) = self.seed {
            cfg.backend.seed = s;
        }
        if let Some(p) = &self.pkh_dir {
            cfg.pkh_dir = Some(p.clone());
        }
        if self.max_steps.is_some() || self.max_depth.is_some() {
            let steps = self.max_steps.unwrap_or(cfg.budget.max_steps_per_agent());
            let depth = self.max_depth.unwrap_or(cfg.budget.max_depth());
            cfg.budget = cfg.with_budget_counts(steps, depth)?;
        }
        cfg.fresh_pkh |= self.fresh_pkh;
        cfg.single_threaded |= self.single_threaded;
        cfg.canonical |= self.canonical;
        Ok(cfg)
    }
}

fn summarize(r: &RunReport, out: &Path) {
    println!(
        "{} {:?}: {} alerts, {} agents, depth {}, {} steps -> {}",
        r.metadata.run_id,
        r.status,
        r.alerts.len(),
        r.metrics.agent_count,
        r.metrics.max_depth,
        r.metrics.total_steps,
        out.display()
    );
}

fn cmd_run(firmware: &Path, common: &CommonArgs) -> Result<ExitCode> {
    if !firmware.is_dir() {
        bail!("{} is not a directory", firmware.display());
    }
    let cfg = common.config()?;
    let preset = TaskPreset::resolve(&common.task)?;
    let handle = cfg.backend_handle()?;
    match run_task(firmware, &preset, &cfg, &handle, &common.out) {
        Ok(r) => {
            summarize(&r, &common.out);
            Ok(ExitCode::SUCCESS)
        }
        Err(HarnessError::RootFailure { explanation, report }) => {
            summarize(&report, &common.out);
            eprintln!("root agent failed: {explanation}");
            Ok(ExitCode::from(ROOT_FAILURE))
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_stability(firmware: &[PathBuf], runs: usize, common: &CommonArgs) -> Result<ExitCode> {
    let cfg = common.config()?;
    let preset = TaskPreset::resolve(&common.task)?;
    let handle = cfg.backend_handle()?;
    let rep = stability_suite(firmware, &preset, runs, &cfg, |_, _| handle.clone(), &common.out)?;
    for e in &rep.entries {
        println!(
            "{} {}: runs {}, agents {:.2} ± {:.2}, alerts {:.2} ± {:.2}, jaccard mean {:.3} min {:.3}, failed {}",
            e.firmware,
            e.task,
            e.runs,
            e.agent_count.mean,
            e.agent_count.std,
            e.alerts.mean,
            e.alerts.std,
            e.jaccard_mean,
            e.jaccard_min,
            e.failed_runs
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn collect_reports(p: &Path, acc: &mut Vec<PathBuf>) -> Result<()> {
    if p.is_file() {
        acc.push(p.to_path_buf());
        return Ok(());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
        .with_context(|| format!("reading {}", p.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .collect();
    entries.sort();
    for e in entries {
        if e.is_dir() {
            collect_reports(&e, acc)?;
        } else if e.file_name().is_some_and(|n| n == REPORT_FILE) {
            acc.push(e);
        }
    }
    Ok(())
}

fn cmd_cdf(metric: &str, out: Option<&Path>, inputs: &[PathBuf]) -> Result<ExitCode> {
    let metric: CdfMetric = metric.parse()?;
    let mut files = Vec::new();
    for p in inputs {
        collect_reports(p, &mut files)?;
    }
    let reports = files
        .iter()
        .map(|f| {
            let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            serde_json::from_str::<RunReport>(&text).with_context(|| format!("parsing {}", f.display()))
        })
        .collect::<Result<Vec<_>>>()?;
    let csv = cdf_csv(&metrics_cdf(&reports, metric)?, metric);
    match out {
        Some(p) => std::fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run { firmware, common } => cmd_run(firmware, common),
        Command::Stability { firmware, runs, common } => cmd_stability(firmware, *runs, common),
        Command::Cdf { metric, out, reports } => cmd_cdf(metric, out.as_deref(), reports),
        Command::Tasks => {
            for p in TaskPreset::builtin_all() {
                println!("{}\t{:?}\t{}", p.id, p.semantic_type, p.prompt);
            }
            Ok(ExitCode::SUCCESS)
        }
    };
    res.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
