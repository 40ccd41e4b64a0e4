use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use gpusched::{Policy, SimConfig, SyntheticTrace};
use serde::Deserialize;

#[derive(Debug, Parser)]
#[command(
    name = "gpusched",
    version,
    about = "Simulate model-serving schedulers on a GPU cluster"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one simulation.
    Run {
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// Write every arrival, decision and completion as JSON lines.
        #[arg(long, value_name = "PATH")]
        event_log: Option<PathBuf>,
    },
    /// Run every scheduler on the same workload for each working set size.
    Compare {
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        output: OutputArgs,
        #[arg(long, value_delimiter = ',', default_value = "15,25,35")]
        working_sets: Vec<usize>,
    },
    /// Run once per value of one config axis.
    Sweep {
        #[command(flatten)]
        sim: SimArgs,
        #[command(flatten)]
        output: OutputArgs,
        /// o3_limit, working_set_size, gpu_count or scheduler.
        #[arg(long, default_value = "o3_limit")]
        axis: String,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0,5,10,15,20,25,30,35,40,45"
        )]
        values: Vec<String>,
    },
    /// Check catalog, trace and config without simulating.
    Validate {
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Write the synthetic trace as CSV.
    GenTrace {
        #[arg(long, value_name = "PATH")]
        out: PathBuf,
        /// TOML file whose [synthetic_trace] table is used.
        #[arg(long, value_name = "PATH")]
        config: Option<PathBuf>,
        #[arg(long)]
        functions: Option<usize>,
        #[arg(long)]
        trace_minutes: Option<usize>,
        #[arg(long)]
        trace_seed: Option<u64>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    /// TOML config; flags override its values.
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_policy)]
    pub scheduler: Option<Policy>,
    #[arg(long)]
    pub o3_limit: Option<u32>,
    #[arg(long)]
    pub working_set: Option<usize>,
    #[arg(long)]
    pub gpus: Option<usize>,
    #[arg(long)]
    pub mem_mb: Option<u64>,
    /// Requests per minute.
    #[arg(long)]
    pub rpm: Option<u64>,
    #[arg(long)]
    pub minutes: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-minute invocation counts (CSV: function_id then one column per minute).
    #[arg(long, value_name = "PATH", conflicts_with = "synthetic_trace")]
    pub trace: Option<PathBuf>,
    /// Model catalog CSV; defaults to the bundled table.
    #[arg(long, value_name = "PATH")]
    pub catalog: Option<PathBuf>,
    /// Use the generated Zipf-like trace instead of a trace file.
    #[arg(long)]
    pub synthetic_trace: bool,
}

#[derive(Debug, Args)]
pub struct OutputArgs {
    /// Report destination; stdout when absent.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Parallel simulations for compare and sweep.
    #[arg(long)]
    pub jobs: Option<usize>,
}

fn parse_policy(s: &str) -> Result<Policy, String> {
    s.parse().map_err(|e: gpusched::Error| e.to_string())
}

/// The `[output]` table of a config file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileOutput {
    pub out: Option<PathBuf>,
    pub format: Option<Format>,
    pub event_log: Option<PathBuf>,
    pub jobs: Option<usize>,
}

/// Settled output options after merging file and flags.
#[derive(Debug)]
pub struct Output {
    pub out: Option<PathBuf>,
    pub format: Format,
    pub event_log: Option<PathBuf>,
    pub jobs: usize,
}

/// Reads a config file. Relative paths inside it resolve against its
/// directory.
pub fn load_config_file(path: &Path) -> Result<(SimConfig, FileOutput)> {
    let text =
        fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut table: toml::Table =
        toml::from_str(&text).with_context(|| format!("invalid TOML in {}", path.display()))?;
    let mut output: FileOutput = match table.remove("output") {
        Some(v) => v
            .try_into()
            .with_context(|| format!("invalid [output] table in {}", path.display()))?,
        None => FileOutput::default(),
    };
    let has_synthetic = table.contains_key("synthetic_trace");
    let mut config: SimConfig = toml::Value::Table(table)
        .try_into()
        .with_context(|| format!("invalid config {}", path.display()))?;
    if !has_synthetic {
        config.synthetic_trace = None;
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let rebase = |p: &mut Option<PathBuf>| {
        if let Some(p) = p.as_mut().filter(|p| p.is_relative()) {
            *p = base.join(&*p);
        }
    };
    rebase(&mut config.catalog);
    rebase(&mut config.trace);
    rebase(&mut output.out);
    rebase(&mut output.event_log);
    Ok((config, output))
}

impl SimArgs {
    /// Builds the run config: file values first, then flags.
    pub fn resolve(&self) -> Result<(SimConfig, FileOutput)> {
        let (mut c, file_output) = match &self.config {
            Some(path) => load_config_file(path)?,
            None => (
                SimConfig {
                    synthetic_trace: None,
                    ..SimConfig::default()
                },
                FileOutput::default(),
            ),
        };
        if let Some(v) = self.scheduler {
            c.scheduler.policy = v;
        }
        if let Some(v) = self.o3_limit {
            c.scheduler.o3_limit = v;
        }
        if let Some(v) = self.working_set {
            c.workload.working_set_size = v;
        }
        if let Some(v) = self.gpus {
            c.gpu_count = v;
        }
        if let Some(v) = self.mem_mb {
            c.capacity_mb = v;
        }
        if let Some(v) = self.rpm {
            c.workload.per_minute_total = v;
        }
        if let Some(v) = self.minutes {
            c.workload.duration_minutes = v;
        }
        if let Some(v) = self.seed {
            c.workload.seed = v;
        }
        if let Some(v) = &self.catalog {
            c.catalog = Some(v.clone());
        }
        if let Some(v) = &self.trace {
            c.trace = Some(v.clone());
            c.synthetic_trace = None;
        }
        if self.synthetic_trace {
            c.trace = None;
            c.synthetic_trace
                .get_or_insert_with(SyntheticTrace::default);
        }
        if c.trace.is_none() && c.synthetic_trace.is_none() {
            bail!("no trace source: pass --trace PATH or --synthetic-trace");
        }
        c.validate()?;
        Ok((c, file_output))
    }
}

impl OutputArgs {
    pub fn resolve(&self, file: FileOutput, default_format: Format) -> Output {
        Output {
            out: self.out.clone().or(file.out),
            format: self.format.or(file.format).unwrap_or(default_format),
            event_log: file.event_log,
            jobs: self
                .jobs
                .or(file.jobs)
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get())),
        }
    }
}
