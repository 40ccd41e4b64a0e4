//! Versioned report formats.
//!
//! CSV has one row per run: schema version, config columns, then metric
//! columns. JSON holds the same data plus the per-model breakdown. The long
//! format has one row per (run, metric) pair for plotting.

use serde::Serialize;

use crate::config::SimConfig;
use crate::error::{Error, Result};
use crate::metrics::SimReport;

/// Bumped whenever a column or field is renamed, removed or reordered.
pub const SCHEMA_VERSION: u32 = 1;

pub const CONFIG_COLUMNS: [&str; 8] = [
    "scheduler",
    "o3_limit",
    "working_set_size",
    "gpu_count",
    "capacity_mb",
    "per_minute_total",
    "duration_minutes",
    "seed",
];

fn config_values(c: &SimConfig) -> [String; 8] {
    [
        c.scheduler.policy.to_string(),
        c.scheduler.o3_limit.to_string(),
        c.workload.working_set_size.to_string(),
        c.gpu_count.to_string(),
        c.capacity_mb.to_string(),
        c.workload.per_minute_total.to_string(),
        c.workload.duration_minutes.to_string(),
        c.workload.seed.to_string(),
    ]
}

#[derive(Serialize)]
struct JsonReport<'a> {
    schema_version: u32,
    config: &'a SimConfig,
    report: &'a SimReport,
}

pub fn to_json(config: &SimConfig, report: &SimReport) -> String {
    let doc = JsonReport {
        schema_version: SCHEMA_VERSION,
        config,
        report,
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("reports serialize");
    s.push('\n');
    s
}

pub fn to_json_many(rows: &[(SimConfig, SimReport)]) -> String {
    let docs: Vec<JsonReport<'_>> = rows
        .iter()
        .map(|(config, report)| JsonReport {
            schema_version: SCHEMA_VERSION,
            config,
            report,
        })
        .collect();
    let mut s = serde_json::to_string_pretty(&docs).expect("reports serialize");
    s.push('\n');
    s
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Invariant(format!("csv buffer: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Invariant(format!("csv write: {e}"))
}

/// Wide format: one row per run.
pub fn to_csv(rows: &[(SimConfig, SimReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = std::iter::once("schema_version")
        .chain(CONFIG_COLUMNS)
        .chain(SimReport::CSV_COLUMNS);
    w.write_record(header).map_err(csv_err)?;
    for (config, report) in rows {
        let record = std::iter::once(SCHEMA_VERSION.to_string())
            .chain(config_values(config))
            .chain(report.csv_values());
        w.write_record(record).map_err(csv_err)?;
    }
    finish(w)
}

/// Long format: one row per run and metric.
pub fn to_long_csv(rows: &[(SimConfig, SimReport)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = std::iter::once("schema_version")
        .chain(CONFIG_COLUMNS)
        .chain(["metric", "value"]);
    w.write_record(header).map_err(csv_err)?;
    for (config, report) in rows {
        let config = config_values(config);
        for (metric, value) in SimReport::CSV_COLUMNS.iter().zip(report.csv_values()) {
            let record = std::iter::once(SCHEMA_VERSION.to_string())
                .chain(config.iter().cloned())
                .chain([metric.to_string(), value]);
            w.write_record(record).map_err(csv_err)?;
        }
    }
    finish(w)
}
