use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msf_core::harness::{self, ExportFormat, JsonDocument, MetricsSummary};
use msf_core::{selftest, AttackKind, Error, ScenarioConfig};

#[derive(Parser)]
#[command(name = "msf-sim", version, about = "Safety filter attack simulation for unicycle fleets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its log.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Forward the received command to the plant unchanged.
        #[arg(long)]
        no_filter: bool,
        #[arg(long, value_parser = ["none", "fdi", "covert"])]
        attack: Option<String>,
        /// Override the fleet size.
        #[arg(long)]
        agents: Option<usize>,
        /// Override the scenario length [s].
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long, default_value = "csv", value_parser = ["csv", "json"])]
        format: String,
    },
    /// Summarise a CSV or JSON log.
    Metrics {
        log: PathBuf,
        /// Scenario config for CSV logs (reference and attack window).
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Run the built-in invariant checks.
    Selftest,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::InitialInfeasibility(_) => 3,
        Error::RuntimeAbort { .. } => 4,
        _ => 1,
    }
}

fn print_summary(s: &MetricsSummary) {
    let opt = |v: Option<f64>| v.map_or("none".to_string(), |t| format!("{t:.2}"));
    println!("steps: {}", s.steps);
    println!("min pairwise distance: {:.6}", s.min_pair_distance);
    println!("min wall clearance: {:.6}", s.min_wall_clearance);
    println!("max intervention: {:.6}", s.max_intervention);
    let spans: Vec<String> = s
        .intervention_intervals
        .iter()
        .map(|[a, b]| format!("[{a:.2}, {b:.2}]"))
        .collect();
    println!("intervention intervals: {}", if spans.is_empty() { "none".into() } else { spans.join(" ") });
    if let Some(first) = s.agent_intervention_onsets.first() {
        println!("agent 1 intervention onset: {}", opt(*first));
    }
    println!("first alarm: {} ({} alarms)", opt(s.first_alarm), s.alarm_count);
    println!(
        "filter modes: {} pass-through, {} modified, {} fallback",
        s.pass_through_count, s.modified_count, s.fallback_count
    );
    if let Some(pre) = s.pre_attack_tracking_error {
        println!("pre-attack tracking error: {pre:.6}");
    }
    println!("final tracking error: {:.6}", s.final_tracking_error);
    if s.pre_attack_tracking_error.is_some() {
        println!("recovery time: {}", opt(s.recovery_time));
    }
}

#[allow(clippy::too_many_arguments)]
fn run(
    config: &Path,
    no_filter: bool,
    attack: Option<&str>,
    agents: Option<usize>,
    duration: Option<f64>,
    out: &Path,
    format: &str,
) -> msf_core::Result<()> {
    let mut cfg = ScenarioConfig::from_file(config)?;
    if no_filter {
        cfg.filter_enabled = false;
    }
    if let Some(a) = attack {
        cfg.attack.kind = a.parse::<AttackKind>()?;
    }
    if let Some(k) = agents {
        cfg.fleet_size = k;
    }
    if let Some(d) = duration {
        cfg.duration = d;
    }
    cfg.validate()?;
    let format: ExportFormat = format.parse()?;

    let log = harness::run_scenario(&cfg)?;
    let summary = harness::summarize(&log.metric_rows(), Some(&log.final_state), &cfg.constraints, &cfg.summary_params())?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    let path = out.join(format!("log.{}", format.extension()));
    match format {
        ExportFormat::Csv => harness::write_csv(&log, &path)?,
        ExportFormat::Json => harness::write_json(
            &JsonDocument {
                config: cfg,
                summary: summary.clone(),
                log,
            },
            &path,
        )?,
    }
    print_summary(&summary);
    println!("log: {}", path.display());
    Ok(())
}

fn metrics(log: &Path, config: Option<&Path>) -> msf_core::Result<()> {
    let summary = if log.extension().is_some_and(|e| e == "json") {
        let doc = harness::read_json(log)?;
        harness::summarize(&doc.log.metric_rows(), Some(&doc.log.final_state), &doc.config.constraints, &doc.config.summary_params())?
    } else {
        let cfg = match config {
            Some(p) => ScenarioConfig::from_file(p)?,
            None => ScenarioConfig::default(),
        };
        let csv = harness::read_csv(log)?;
        let mut params = cfg.summary_params();
        params.reference.fleet_size = csv.fleet_size;
        harness::summarize(&csv.metric_rows(), None, &cfg.constraints, &params)?
    };
    print_summary(&summary);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run {
            config,
            no_filter,
            attack,
            agents,
            duration,
            out,
            format,
        } => run(config, *no_filter, attack.as_deref(), *agents, *duration, out, format),
        Command::Metrics { log, config } => metrics(log, config.as_deref()),
        Command::Selftest => {
            let checks = selftest::run_all();
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().all(|c| c.passed) {
                Ok(())
            } else {
                return ExitCode::from(1);
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
