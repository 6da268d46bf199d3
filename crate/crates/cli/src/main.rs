use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hdpsim_cli::{pulsemeter, run_scenario, write_trace, CliError, Scenario};
use log::LevelFilter;

#[derive(Parser)]
#[command(
    name = "hdpsim",
    version,
    about = "Deterministic Bluetooth health-device link simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file and write its trace and metrics.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Stop at this simulated time instead of the scenario's end.
        #[arg(long)]
        until: Option<u64>,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        metrics: PathBuf,
    },
    /// Check a scenario file without running it.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
    /// Run a packaged scenario.
    Demo {
        name: Demo,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "pulsemeter.trace.jsonl")]
        trace: PathBuf,
        #[arg(long, default_value = "pulsemeter.metrics.json")]
        metrics: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Demo {
    Pulsemeter,
}

fn init_logging() -> Result<(), CliError> {
    let level = match std::env::var("SIM_LOG_LEVEL").as_deref() {
        Err(_) => LevelFilter::Off,
        Ok("error") => LevelFilter::Error,
        Ok("warn") => LevelFilter::Warn,
        Ok("info") => LevelFilter::Info,
        Ok("debug") => LevelFilter::Debug,
        Ok(other) => {
            return Err(CliError::Usage(format!(
                "SIM_LOG_LEVEL must be one of error, warn, info, debug; got {other:?}"
            )))
        }
    };
    env_logger::Builder::new().filter_level(level).init();
    Ok(())
}

fn simulate(
    scenario: &Scenario,
    seed: u64,
    until: Option<u64>,
    trace: &Path,
    metrics: &Path,
) -> Result<(), CliError> {
    let run = run_scenario(scenario, seed, until)?;
    write_trace(&run, trace)?;
    run.metrics.write(metrics)?;
    run.check()?;
    let m = &run.metrics.measurements;
    println!(
        "t={}us events={} sent={} delivered={} evicted={} sha256={}",
        run.metrics.end_us,
        run.metrics.trace_events,
        m.sent,
        m.delivered,
        m.evicted,
        run.metrics.trace_sha256
    );
    Ok(())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate {
            scenario,
            seed,
            until,
            trace,
            metrics,
        } => simulate(&Scenario::load(&scenario)?, seed, until, &trace, &metrics),
        Command::Validate { scenario } => {
            let s = Scenario::load(&scenario)?;
            println!(
                "{}: {} devices, {} timeline steps",
                scenario.display(),
                s.devices.len(),
                s.timeline.len()
            );
            Ok(())
        }
        Command::Demo {
            name: Demo::Pulsemeter,
            seed,
            trace,
            metrics,
        } => simulate(&pulsemeter(), seed, None, &trace, &metrics),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let err = CliError::Usage(e.to_string().trim().to_string());
            eprintln!("{}", err.to_json_line());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    let result = init_logging().and_then(|()| execute(cli));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.to_json_line());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
