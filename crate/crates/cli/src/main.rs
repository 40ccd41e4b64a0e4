mod args;

use std::io::Write;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::Parser;
use gpusched::{report, EngineOptions, Policy, SimConfig, SimReport, SweepAxis, SyntheticTrace};
use tempfile::NamedTempFile;

use args::{load_config_file, Cli, Command, Format, Output};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let internal = e
                .chain()
                .filter_map(|c| c.downcast_ref::<gpusched::Error>())
                .any(gpusched::Error::is_internal);
            ExitCode::from(if internal { 2 } else { 1 })
        }
    }
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Run {
            sim,
            output,
            event_log,
        } => {
            let (config, file) = sim.resolve()?;
            let mut out = output.resolve(file, Format::Json);
            out.event_log = event_log.or(out.event_log);
            cmd_run(&config, &out)
        }
        Command::Compare {
            sim,
            output,
            working_sets,
        } => {
            let (config, file) = sim.resolve()?;
            cmd_compare(&config, &output.resolve(file, Format::Csv), &working_sets)
        }
        Command::Sweep {
            sim,
            output,
            axis,
            values,
        } => {
            let (config, file) = sim.resolve()?;
            let axis: SweepAxis = axis.parse()?;
            cmd_sweep(&config, &output.resolve(file, Format::Csv), axis, &values)
        }
        Command::Validate { sim } => {
            let (config, _) = sim.resolve()?;
            cmd_validate(&config)
        }
        Command::GenTrace {
            out,
            config,
            functions,
            trace_minutes,
            trace_seed,
        } => {
            let mut synth = match &config {
                Some(path) => load_config_file(path)?
                    .0
                    .synthetic_trace
                    .unwrap_or_default(),
                None => SyntheticTrace::default(),
            };
            if let Some(v) = functions {
                synth.functions = v;
            }
            if let Some(v) = trace_minutes {
                synth.minutes = v;
            }
            if let Some(v) = trace_seed {
                synth.seed = v;
            }
            let trace = synth.generate()?;
            write_atomic(&out, &trace.to_csv())?;
            println!(
                "wrote {} functions x {} minutes to {}",
                trace.functions().len(),
                trace.minutes(),
                out.display()
            );
            Ok(())
        }
    }
}

fn cmd_run(config: &SimConfig, out: &Output) -> Result<()> {
    let options = EngineOptions {
        record_events: out.event_log.is_some(),
        ..EngineOptions::default()
    };
    let run = gpusched::run(config, options)?;
    let rows = [(config.clone(), run.report.clone())];
    let body = match out.format {
        Format::Json => report::to_json(config, &run.report),
        Format::Csv => report::to_csv(&rows)?,
    };
    if let Some(path) = &out.event_log {
        write_atomic(path, &run.event_log_jsonl())?;
    }
    let summary = summary_line(config, &run.report);
    match &out.out {
        Some(path) => {
            write_atomic(path, &body)?;
            println!("{summary}");
        }
        None => {
            print!("{body}");
            eprintln!("{summary}");
        }
    }
    Ok(())
}

fn summary_line(config: &SimConfig, r: &SimReport) -> String {
    let f = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"));
    format!(
        "{}: {} requests, avg latency {} s, miss ratio {}, false-miss ratio {}",
        config.scheduler.policy,
        r.request_count,
        f(r.avg_latency_s),
        f(r.cache_miss_ratio),
        f(r.false_miss_ratio),
    )
}

fn cmd_compare(base: &SimConfig, out: &Output, working_sets: &[usize]) -> Result<()> {
    let mut configs = Vec::new();
    for &ws in working_sets {
        for policy in Policy::ALL {
            let mut c = base.clone();
            c.workload.working_set_size = ws;
            c.scheduler.policy = policy;
            c.validate()?;
            configs.push(c);
        }
    }
    let inputs = base.load_inputs()?;
    let runs = gpusched::run_many(&inputs, &configs, out.jobs, EngineOptions::default())?;
    let rows: Vec<_> = configs
        .into_iter()
        .zip(runs.into_iter().map(|r| r.report))
        .collect();
    let body = match out.format {
        Format::Json => report::to_json_many(&rows),
        Format::Csv => report::to_long_csv(&rows)?,
    };
    emit(out, &body, rows.len())
}

fn cmd_sweep(base: &SimConfig, out: &Output, axis: SweepAxis, values: &[String]) -> Result<()> {
    let rows = gpusched::run_sweep(base, axis, values, out.jobs)?;
    let body = match out.format {
        Format::Json => report::to_json_many(&rows),
        Format::Csv => report::to_csv(&rows)?,
    };
    emit(out, &body, rows.len())
}

fn emit(out: &Output, body: &str, runs: usize) -> Result<()> {
    match &out.out {
        Some(path) => {
            write_atomic(path, body)?;
            println!("{runs} runs written to {}", path.display());
        }
        None => print!("{body}"),
    }
    Ok(())
}

fn cmd_validate(config: &SimConfig) -> Result<()> {
    let inputs = config.load_inputs()?;
    let workload = inputs.workload(config)?;
    println!(
        "ok: {} catalog models, {} trace functions, {} requests over {} minutes; every mapped model fits {} MB",
        inputs.catalog.len(),
        inputs.trace.functions().len(),
        workload.requests.len(),
        config.workload.duration_minutes,
        config.capacity_mb
    );
    Ok(())
}

/// Writes via a temporary file in the destination directory, then renames.
fn write_atomic(path: &Path, contents: &str) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir)
        .with_context(|| format!("cannot create a file in {}", dir.display()))?;
    tmp.write_all(contents.as_bytes())
        .with_context(|| format!("cannot write {}", path.display()))?;
    tmp.persist(path)
        .with_context(|| format!("cannot write {}", path.display()))?;
    Ok(())
}
