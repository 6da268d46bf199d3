//! Scenario runner for the `hdpsim` simulator.
//!
//! A scenario file lists devices, medium settings, pairing PINs and a
//! timeline of actions. Running it yields a JSONL trace and a metrics
//! report; both are byte-identical for the same scenario and seed.

pub mod error;
pub mod metrics;
pub mod run;
pub mod scenario;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

pub use error::CliError;
pub use metrics::MetricsReport;
pub use run::{run_scenario, Run};
pub use scenario::Scenario;

/// The packaged pulse-meter walkthrough.
pub const PULSEMETER_SCENARIO: &str = include_str!("../scenarios/pulsemeter.json");

pub fn pulsemeter() -> Scenario {
    Scenario::from_json(PULSEMETER_SCENARIO).expect("packaged scenario is valid")
}

pub fn write_trace(run: &Run, path: &Path) -> Result<(), CliError> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut out = BufWriter::new(file);
    run.trace
        .write_jsonl(&mut out)
        .and_then(|()| out.flush())
        .map_err(|e| CliError::io(path, e))
}
