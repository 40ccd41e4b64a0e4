use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::catalog::Catalog;
use crate::cluster::DEFAULT_CAPACITY_MB;
use crate::error::{Error, Result};
use crate::sched::SchedulerConfig;
use crate::workload::{synthesize, SyntheticTrace, TraceMatrix, Workload, WorkloadSpec};

pub const DEFAULT_GPU_COUNT: usize = 12;

/// Everything needed to reproduce one run.
///
/// Exactly one trace source must be named: a trace file or the synthetic
/// generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub gpu_count: usize,
    pub capacity_mb: u64,
    pub scheduler: SchedulerConfig,
    pub workload: WorkloadSpec,
    /// Catalog CSV; the bundled table when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub catalog: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trace: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synthetic_trace: Option<SyntheticTrace>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            gpu_count: DEFAULT_GPU_COUNT,
            capacity_mb: DEFAULT_CAPACITY_MB,
            scheduler: SchedulerConfig::default(),
            workload: WorkloadSpec::default(),
            catalog: None,
            trace: None,
            synthetic_trace: Some(SyntheticTrace::default()),
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gpu_count == 0 {
            return Err(Error::Config("gpu_count must be at least 1".into()));
        }
        if self.capacity_mb == 0 {
            return Err(Error::Config("capacity_mb must be positive".into()));
        }
        match (&self.trace, &self.synthetic_trace) {
            (Some(_), Some(_)) => Err(Error::Config(
                "both a trace file and a synthetic trace are configured".into(),
            )),
            (None, None) => Err(Error::Config(
                "no trace source: give a trace file or enable the synthetic trace".into(),
            )),
            _ => self.workload.validate(),
        }
    }

    pub fn load_inputs(&self) -> Result<Inputs> {
        self.validate()?;
        let catalog = match &self.catalog {
            Some(path) => Catalog::load(path)?,
            None => Catalog::builtin(),
        };
        let trace = match (&self.trace, &self.synthetic_trace) {
            (Some(path), _) => TraceMatrix::load(path)?,
            (None, Some(synth)) => synth.generate()?,
            (None, None) => unreachable!("validated above"),
        };
        Ok(Inputs { catalog, trace })
    }
}

/// Parsed catalog and trace, shared read-only between runs.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub catalog: Catalog,
    pub trace: TraceMatrix,
}

impl Inputs {
    /// Synthesizes the workload and checks that every model it uses fits on
    /// a GPU of the configured size.
    pub fn workload(&self, config: &SimConfig) -> Result<Workload> {
        config.validate()?;
        let workload = synthesize(&self.trace, &config.workload, &self.catalog)?;
        check_fits(&workload.models, config.capacity_mb)?;
        Ok(workload)
    }
}

pub fn check_fits(models: &Catalog, capacity_mb: u64) -> Result<()> {
    match models
        .profiles()
        .iter()
        .find(|p| p.occupation_mb > capacity_mb)
    {
        Some(p) => Err(Error::ModelTooLarge {
            model_id: p.model_id.clone(),
            occupation_mb: p.occupation_mb,
            capacity_mb,
        }),
        None => Ok(()),
    }
}
