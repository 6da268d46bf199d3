//! Executes a scenario timeline on a fresh simulation.

use hdpsim::hdp::AssocState;
use hdpsim::{
    AssocId, DeviceAddress, InquiryParams, Measurement, MediumModel, PairKey, SimTime, Simulation,
    TimedAction, Trace,
};
use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::CliError;
use crate::metrics::MetricsReport;
use crate::scenario::{Action, Reading, Scenario};

/// Keeps the reading generator independent of the protocol streams.
const READING_STREAM: u64 = 7;

pub struct Run {
    pub trace: Trace,
    pub metrics: MetricsReport,
}

impl Run {
    /// The first invariant violation recorded during the run, as an error.
    pub fn check(&self) -> Result<(), CliError> {
        match self.metrics.violations.first() {
            None => Ok(()),
            Some(v) => Err(CliError::Invariant {
                invariant: v.invariant.clone(),
                t_us: v.t_us,
                detail: v.detail.clone(),
            }),
        }
    }
}

struct Runner<'a> {
    scenario: &'a Scenario,
    sim: Simulation,
    readings: ChaCha8Rng,
}

/// Runs `scenario` with `seed` until `until_us`, or until the scenario's own
/// end when no limit is given. Timeline steps later than the limit are
/// skipped.
pub fn run_scenario(
    scenario: &Scenario,
    seed: u64,
    until_us: Option<u64>,
) -> Result<Run, CliError> {
    let medium = MediumModel {
        loss_probability: scenario.medium.loss_probability,
        rng_seed: seed,
    };
    let setup = |field: String, e: &dyn std::fmt::Display| CliError::Validation {
        field,
        rule: e.to_string(),
    };
    let mut sim = Simulation::new(medium, scenario.overrides.clone())
        .map_err(|e| setup("overrides".into(), &e))?;
    for (i, d) in scenario.devices.iter().enumerate() {
        sim.add_device(d.config())
            .map_err(|e| setup(format!("devices[{i}]"), &e))?;
        if let Some(mode) = d.discoverability {
            sim.set_discoverability(d.address, mode)
                .map_err(|e| setup(format!("devices[{i}].discoverability"), &e))?;
        }
        if let Some(mode) = d.connectability {
            sim.set_connectability(d.address, mode)
                .map_err(|e| setup(format!("devices[{i}].connectability"), &e))?;
        }
        if let Some(role) = &d.hdp_role {
            sim.set_hdp_role(d.address, role.clone())
                .map_err(|e| setup(format!("devices[{i}].hdp_role"), &e))?;
        }
    }
    let mut readings = ChaCha8Rng::seed_from_u64(seed);
    readings.set_stream(READING_STREAM);
    let mut runner = Runner {
        scenario,
        sim,
        readings,
    };

    let end = until_us.unwrap_or_else(|| scenario.end_us());
    for step in &scenario.timeline {
        if step.at_us > end {
            break;
        }
        runner.sim.run_until(SimTime::from_micros(step.at_us));
        debug!(
            "t={} action {:?}",
            runner.sim.now().as_micros(),
            step.action
        );
        runner.apply(step.at_us, &step.action);
    }
    runner.sim.run_until(SimTime::from_micros(end));
    runner.check_accounting();

    let metrics = MetricsReport::collect(&runner.sim, seed);
    info!(
        "finished at {} us with {} trace events",
        metrics.end_us, metrics.trace_events
    );
    Ok(Run {
        trace: runner.sim.into_trace(),
        metrics,
    })
}

impl Runner<'_> {
    fn error(&mut self, dev: DeviceAddress, op: &str, kind: &str, message: String) {
        info!("{op} failed: {message}");
        self.sim.trace_event(
            "error",
            dev,
            json!({ "op": op, "error": kind, "message": message }),
        );
    }

    fn schedule(&mut self, at_us: u64, action: TimedAction) {
        // Addresses and values were validated with the scenario.
        self.sim
            .schedule_action(SimTime::from_micros(at_us), action)
            .expect("validated action");
    }

    fn live_association(&self, source: DeviceAddress, sink: DeviceAddress) -> Option<AssocId> {
        self.sim
            .associations()
            .filter(|a| {
                a.source() == source && a.sink() == sink && a.state() != AssocState::Released
            })
            .map(|a| a.id())
            .last()
    }

    fn reading(&mut self, r: &Reading) -> Measurement {
        let mut draw = |base: f64| {
            let v = if r.spread > 0.0 {
                base + self.readings.gen_range(-r.spread..=r.spread)
            } else {
                base
            };
            (v.max(0.0) * 10.0).round() as i32
        };
        let bpm = draw(r.heart_rate_bpm);
        let filling = draw(r.filling_duration_ms);
        let awi = draw(r.ascending_wave_index_pct);
        Measurement::heart_rate(bpm, filling, awi)
    }

    fn apply(&mut self, at_us: u64, action: &Action) {
        match action {
            Action::SetMode {
                device,
                discoverability,
                connectability,
            } => {
                if let Some(mode) = discoverability {
                    if let Err(e) = self.sim.set_discoverability(*device, *mode) {
                        self.error(*device, "set_mode", "InvalidMode", e.to_string());
                    }
                }
                if let Some(mode) = connectability {
                    if let Err(e) = self.sim.set_connectability(*device, *mode) {
                        self.error(*device, "set_mode", "InvalidMode", e.to_string());
                    }
                }
            }
            Action::StartInquiry {
                device,
                duration_us,
                max_responses,
            } => {
                let params = InquiryParams {
                    duration_us: *duration_us,
                    max_responses: *max_responses,
                };
                if let Err(e) = self.sim.inquire(*device, params) {
                    self.error(*device, "start_inquiry", "InquiryFailed", e.to_string());
                }
            }
            Action::Page { master, target } => {
                if let Err(e) = self.sim.page(*master, *target) {
                    self.error(*master, "page", e.kind(), e.to_string());
                }
            }
            Action::Pair { a, b } => {
                let (pin_a, pin_b) = self.scenario.pins_for(*a, *b).expect("validated PIN entry");
                if let Err(e) = self.sim.pair(*a, *b, &pin_a, &pin_b) {
                    self.error(*a, "pair", e.kind(), e.to_string());
                }
            }
            Action::Associate {
                source,
                sink,
                specialization,
            } => {
                let pair = PairKey::new(*source, *sink);
                if self.sim.control_channel(pair).is_none() {
                    if let Some(link) = self.sim.link_between(*source, *sink) {
                        if let Err(e) = self.sim.open_control_channel(link) {
                            self.error(*sink, "open_control_channel", e.kind(), e.to_string());
                        }
                    }
                }
                if let Err(e) = self.sim.associate(*source, *sink, *specialization) {
                    self.error(*source, "associate", e.kind(), e.to_string());
                }
            }
            Action::SendMeasurements {
                source,
                sink,
                count,
                interval_us,
                reading,
            } => {
                let Some(assoc) = self.live_association(*source, *sink) else {
                    self.error(
                        *source,
                        "send_measurements",
                        "UnknownAssociation",
                        "no live association".into(),
                    );
                    return;
                };
                let start = self.sim.now().as_micros().max(at_us);
                for i in 0..u64::from(*count) {
                    let measurement = self.reading(reading);
                    self.schedule(
                        start + i * interval_us,
                        TimedAction::SendMeasurement { assoc, measurement },
                    );
                }
            }
            Action::MoveDevice { device, position } => {
                self.schedule(
                    at_us,
                    TimedAction::MoveDevice {
                        device: *device,
                        position: *position,
                    },
                );
            }
            Action::DropLink { a, b } => {
                self.schedule(at_us, TimedAction::DropLink { a: *a, b: *b })
            }
            Action::SetLoss { loss_probability } => {
                self.schedule(at_us, TimedAction::SetLossProbability(*loss_probability));
            }
            Action::Release { source, sink } => {
                let Some(assoc) = self.live_association(*source, *sink) else {
                    self.error(
                        *source,
                        "release",
                        "UnknownAssociation",
                        "no live association".into(),
                    );
                    return;
                };
                if let Err(e) = self.sim.release(assoc) {
                    self.error(*source, "release", e.kind(), e.to_string());
                }
            }
            Action::RunUntil {} => {}
        }
    }

    /// Measurement accounting must balance at the end of every run.
    fn check_accounting(&mut self) {
        let c = self.sim.measurement_totals();
        let balanced = c.delivered <= c.sent && c.delivered + c.evicted + c.abandoned <= c.sent;
        if !balanced {
            self.sim.violation(
                "measurement_accounting",
                format!(
                    "sent {} delivered {} evicted {} abandoned {}",
                    c.sent, c.delivered, c.evicted, c.abandoned
                ),
            );
        }
    }
}
