//! Batch front-end: parses experiment configs, runs measure, contribution,
//! axiom, consistency and Monte Carlo tasks, and emits CSV/JSON reports and
//! SVG plots with byte-deterministic output for a fixed config and seed.

// index loops mirror the per-asset arithmetic of the engine
#![allow(clippy::needless_range_loop)]

mod config;
mod error;
mod plot;
mod tasks;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;

use config::{build_experiment, load_config, ExperimentConfig, TaskConfig};
use error::CliError;
use tasks::{TaskContext, TaskRecord, TaskStatus};

#[derive(Parser)]
#[command(
    name = "risktree",
    about = "Conditional risk measures and risk contributions on binary scenario trees",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (strict JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Trials override for axiom tasks.
    #[arg(long, global = true)]
    trials: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Conditional coherent and deviation tables (C_t / D_t).
    Measure,
    /// Contribution tables and aggregation residuals.
    Contrib,
    /// Seeded axiom suite violation report.
    Axioms,
    /// Time-consistency residuals (C3t / D3t).
    Consistency,
    /// Regression Monte Carlo BSDE estimate.
    BsdeMc,
    /// End-to-end kappa-ignorance reproduction with every identity checked.
    ExampleKappa,
    /// Static standard-deviation contribution table.
    Stddev,
    /// Run every task listed in the config.
    Run,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Measure => "measure",
            Command::Contrib => "contrib",
            Command::Axioms => "axioms",
            Command::Consistency => "consistency",
            Command::BsdeMc => "bsde-mc",
            Command::ExampleKappa => "example-kappa",
            Command::Stddev => "stddev",
            Command::Run => "run",
        }
    }

    fn selects(self, task: &TaskConfig) -> bool {
        match self {
            Command::Run => true,
            Command::Measure => {
                matches!(task, TaskConfig::Measure(_) | TaskConfig::Deviation(_))
            }
            Command::Contrib => matches!(task, TaskConfig::Contrib(_)),
            Command::Axioms => matches!(task, TaskConfig::Axioms(_)),
            Command::Consistency => matches!(task, TaskConfig::Consistency(_)),
            Command::BsdeMc => matches!(task, TaskConfig::BsdeMc(_)),
            Command::ExampleKappa => matches!(task, TaskConfig::ExampleKappa(_)),
            Command::Stddev => matches!(task, TaskConfig::Stddev(_)),
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = run(&cli);
    ExitCode::from(code as u8)
}

fn run(cli: &Cli) -> i32 {
    let command = cli.command.name();
    let config_path = match &cli.config {
        Some(p) => p.clone(),
        None => {
            return abort_with(
                cli,
                command,
                &CliError::schema("--config <path> is required".to_string()),
                None,
            )
        }
    };
    let parsed = match load_config(&config_path) {
        Ok(c) => c,
        Err(e) => return abort_with(cli, command, &e, None),
    };
    let experiment = match build_experiment(parsed.clone(), cli.seed, cli.trials) {
        Ok(e) => e,
        Err(e) => return abort_with(cli, command, &e, Some(&parsed)),
    };

    let out_dir = cli
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(&experiment.config.output_dir));
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        let err = CliError::internal(format!("cannot create {}: {e}", out_dir.display()));
        return abort_with(cli, command, &err, Some(&experiment.config));
    }

    let selected: Vec<&TaskConfig> = experiment
        .config
        .tasks
        .iter()
        .filter(|t| cli.command.selects(t))
        .collect();
    if selected.is_empty() {
        let err = CliError::schema(format!("config lists no task for command `{command}`"));
        return abort_with(cli, command, &err, Some(&experiment.config));
    }

    let mut records: Vec<TaskRecord> = Vec::new();
    let mut context = TaskContext::new(&experiment, &out_dir);
    for task in &selected {
        let started = std::time::Instant::now();
        let record = context.run(task);
        eprintln!(
            "task {}: {:?} in {:.1} ms",
            record.name,
            record.status,
            started.elapsed().as_secs_f64() * 1e3
        );
        records.push(record);
    }
    match context.flush_measures() {
        Ok(Some(file)) => {
            for record in records.iter_mut() {
                if (record.name == "measure" || record.name == "deviation")
                    && !record.files.contains(&file)
                {
                    record.files.push(file.clone());
                }
            }
        }
        Ok(None) => {}
        Err(e) => records.push(TaskRecord {
            name: "measures-flush".into(),
            status: TaskStatus::Error,
            residuals: serde_json::Value::Null,
            files: vec![],
            error: Some(e),
        }),
    }

    let mut exit = 0;
    for record in &records {
        let code = match record.status {
            TaskStatus::Pass => 0,
            TaskStatus::Fail => 1,
            TaskStatus::Error => record.error.as_ref().map_or(1, CliError::exit_code),
        };
        exit = exit.max(code);
    }

    let mut files: Vec<String> = Vec::new();
    for record in &records {
        for f in &record.files {
            if !files.contains(f) {
                files.push(f.clone());
            }
        }
    }
    files.push("report.json".into());

    let report = json!({
        "command": command,
        "seed": experiment.seed,
        "status": if exit == 0 { "pass" } else { "fail" },
        "exit_code": exit,
        "tasks": records,
        "files": files,
        "config": experiment.config,
    });
    let report_path = out_dir.join("report.json");
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    if let Err(e) = std::fs::write(&report_path, &text) {
        eprintln!("cannot write {}: {e}", report_path.display());
        return 1;
    }

    for record in &records {
        match record.status {
            TaskStatus::Pass => println!("task {}: pass", record.name),
            TaskStatus::Fail => println!("task {}: FAIL {}", record.name, record.residuals),
            TaskStatus::Error => println!(
                "task {}: ERROR {}",
                record.name,
                record
                    .error
                    .as_ref()
                    .map_or_else(String::new, |e| e.to_string())
            ),
        }
    }
    exit
}

/// Print a machine-readable error record; write a report if an output
/// directory is reachable.
fn abort_with(
    cli: &Cli,
    command: &str,
    error: &CliError,
    config: Option<&ExperimentConfig>,
) -> i32 {
    let record = json!({
        "command": command,
        "status": "error",
        "error": error,
        "exit_code": error.exit_code(),
    });
    println!("{}", serde_json::to_string(&record).expect("error record"));
    let out_dir = cli
        .out
        .clone()
        .or_else(|| config.map(|c| PathBuf::from(&c.output_dir)));
    if let Some(dir) = out_dir {
        if std::fs::create_dir_all(&dir).is_ok() {
            let report = json!({
                "command": command,
                "status": "error",
                "error": error,
                "exit_code": error.exit_code(),
                "tasks": [],
                "files": ["report.json"],
            });
            let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
            text.push('\n');
            let _ = std::fs::write(dir.join("report.json"), text);
        }
    }
    error.exit_code()
}
