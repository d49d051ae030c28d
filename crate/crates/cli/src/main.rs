//! chanforge: deterministic state-channel protocol simulator.
//!
//! `run` executes a scenario (built-in name or JSON config file), writes
//! optional trace/report files, and exits 0 when every invariant passed,
//! 1 on a violation, 2 on usage or config errors. `scenarios` lists the
//! built-ins; `verify` re-checks the invariants of a previously written
//! trace offline.

use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use chanforge_core::engine::Engine;
use chanforge_core::scenario::{self, ScenarioConfig};
use chanforge_core::trace::{verify_trace, RunReport, TraceEvent};

#[derive(Parser)]
#[command(
    name = "chanforge",
    version,
    about = "state-channel protocol simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario: a built-in name or a path to a JSON config.
    Run {
        scenario: String,
        /// Write the trace as JSON-lines.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Write the run report as JSON.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Override the scenario seed (CHANFORGE_SEED also works).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// List the built-in scenarios.
    Scenarios,
    /// Re-check the invariants of a trace file offline.
    Verify { trace: PathBuf },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Run {
            scenario,
            trace,
            report,
            seed,
        } => run(scenario, trace, report, seed),
        Command::Scenarios => {
            for name in scenario::BUILTIN_NAMES {
                println!("{name}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Verify { trace } => verify(trace),
    }
}

fn load_scenario(name_or_path: &str) -> Result<ScenarioConfig> {
    if let Some(cfg) = scenario::builtin(name_or_path) {
        return Ok(cfg);
    }
    let path = PathBuf::from(name_or_path);
    if !path.exists() {
        anyhow::bail!(
            "{name_or_path:?} is neither a built-in scenario nor a config file \
             (see `chanforge scenarios`)"
        );
    }
    let data = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let cfg: ScenarioConfig =
        serde_json::from_str(&data).with_context(|| format!("parsing {}", path.display()))?;
    Ok(cfg)
}

fn run(
    scenario: String,
    trace_path: Option<PathBuf>,
    report_path: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<ExitCode> {
    let mut cfg = load_scenario(&scenario)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    } else if let Ok(env_seed) = std::env::var("CHANFORGE_SEED") {
        cfg.seed = env_seed
            .parse()
            .context("CHANFORGE_SEED must be an unsigned integer")?;
    }
    let (report, events) = Engine::run(cfg).map_err(|e| anyhow::anyhow!("config invalid: {e}"))?;
    if let Some(path) = trace_path {
        write_trace(&path, &events)?;
    }
    if let Some(path) = report_path {
        let json = serde_json::to_string_pretty(&report)?;
        fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
    }
    print_report(&report);
    Ok(if report.all_pass() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn write_trace(path: &PathBuf, events: &[TraceEvent]) -> Result<()> {
    let mut out = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    for event in events {
        serde_json::to_writer(&mut out, event)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn print_report(report: &RunReport) {
    println!(
        "scenario {} (seed {}): {} rounds, {} events, trace {}",
        report.scenario,
        report.seed,
        report.rounds,
        report.event_count,
        &report.trace_hash[..16],
    );
    for inv in &report.invariants {
        let status = if inv.pass { "pass" } else { "FAIL" };
        match (&inv.first_violation_seq, &inv.detail) {
            (Some(seq), Some(detail)) => {
                println!(
                    "  {status}  {} (first violation at event {seq}: {detail})",
                    inv.name
                )
            }
            _ => println!("  {status}  {}", inv.name),
        }
    }
    if report.refusals > 0 {
        println!("  {} environment requests refused with ⊥", report.refusals);
    }
    if report.aborts > 0 {
        println!("  {} protocol flows aborted", report.aborts);
    }
    for settlement in &report.settlements {
        println!(
            "  settlement {} at height {}: {} draws, {} payouts, {} unrecovered",
            settlement.merchant,
            settlement.period_end,
            settlement.collateral_draws.len(),
            settlement.payouts.len(),
            settlement.unrecovered.len(),
        );
    }
}

fn verify(path: PathBuf) -> Result<ExitCode> {
    let data = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let mut events = Vec::new();
    for (idx, line) in data.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let event: TraceEvent = serde_json::from_str(line)
            .with_context(|| format!("parsing trace line {}", idx + 1))?;
        events.push(event);
    }
    let (results, hash_mismatch) = verify_trace(&events);
    let mut ok = true;
    for inv in &results {
        let status = if inv.pass { "pass" } else { "FAIL" };
        ok &= inv.pass;
        match (&inv.first_violation_seq, &inv.detail) {
            (Some(seq), Some(detail)) => {
                println!(
                    "  {status}  {} (first violation at event {seq}: {detail})",
                    inv.name
                )
            }
            _ => println!("  {status}  {}", inv.name),
        }
    }
    if let Some(mismatch) = hash_mismatch {
        ok = false;
        println!("  FAIL  trace-hash ({mismatch})");
    } else {
        println!("  pass  trace-hash");
    }
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
