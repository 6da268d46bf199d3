//! End-of-run summary written next to the trace.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use hdpsim::hdp::MeasurementCounters;
use hdpsim::{DeviceAddress, InvariantViolation, Simulation};
use serde::Serialize;

use crate::error::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub end_us: u64,
    pub trace_events: usize,
    pub trace_sha256: String,
    /// First answer latency of each inquiry, in start order; `null` when
    /// nothing answered.
    pub discovery_latency_us: Vec<Option<u64>>,
    /// Message count of each completed MDL creation.
    pub create_handshake_msgs: Vec<u64>,
    /// Message count of each completed MDL reconnection.
    pub reconnect_handshake_msgs: Vec<u64>,
    pub measurements: MeasurementMetrics,
    pub sync: Vec<SyncMetrics>,
    pub piconets: Vec<PiconetMetrics>,
    pub errors: BTreeMap<String, u64>,
    pub violations: Vec<InvariantViolation>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MeasurementMetrics {
    pub sent: u64,
    pub acked: u64,
    pub buffered: u64,
    pub evicted: u64,
    pub delivered: u64,
    pub abandoned: u64,
    pub in_flight: u64,
}

impl From<MeasurementCounters> for MeasurementMetrics {
    fn from(c: MeasurementCounters) -> Self {
        Self {
            sent: c.sent,
            acked: c.acked,
            buffered: c.buffered,
            evicted: c.evicted,
            delivered: c.delivered,
            abandoned: c.abandoned,
            in_flight: c.sent.saturating_sub(c.delivered + c.evicted + c.abandoned),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SyncMetrics {
    pub source: DeviceAddress,
    pub sink: DeviceAddress,
    pub offset_us: i64,
    pub accuracy_us: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct PiconetMetrics {
    pub master: DeviceAddress,
    pub slaves: Vec<DeviceAddress>,
    pub rate_cap_bps: u64,
    pub granted_bps: BTreeMap<DeviceAddress, u64>,
}

/// Counts MCAP messages per handshake. A handshake starts with its request
/// and is complete once its final message has been sent.
fn handshake_sizes(sim: &Simulation, op: &str, last_msg: &str) -> Vec<u64> {
    let mut open: BTreeMap<(u64, u64), u64> = BTreeMap::new();
    let mut done = Vec::new();
    for r in sim
        .trace()
        .events("mcap_msg")
        .filter(|r| r.detail["op"] == op)
    {
        let key = (
            r.detail["link"].as_u64().unwrap_or_default(),
            r.detail["mdl"].as_u64().unwrap_or_default(),
        );
        if r.detail["msg"] == "request" {
            open.insert(key, 0);
        }
        if let Some(n) = open.get_mut(&key) {
            *n += 1;
            if r.detail["msg"] == last_msg {
                done.push(*n);
                open.remove(&key);
            }
        }
    }
    done
}

impl MetricsReport {
    pub fn collect(sim: &Simulation, seed: u64) -> Self {
        let trace = sim.trace();
        let mut errors = BTreeMap::new();
        for r in trace.events("error") {
            let kind = r.detail["error"].as_str().unwrap_or("unknown").to_string();
            *errors.entry(kind).or_insert(0) += 1;
        }
        Self {
            seed,
            end_us: sim.now().as_micros(),
            trace_events: trace.len(),
            trace_sha256: trace.digest(),
            discovery_latency_us: sim
                .inquiry_records()
                .iter()
                .map(|r| r.first_latency_us())
                .collect(),
            create_handshake_msgs: handshake_sizes(sim, "create", "confirm"),
            reconnect_handshake_msgs: handshake_sizes(sim, "reconnect", "accept"),
            measurements: sim.measurement_totals().into(),
            sync: sim
                .associations()
                .filter_map(|a| {
                    a.clock_map().map(|c| SyncMetrics {
                        source: a.source(),
                        sink: a.sink(),
                        offset_us: c.offset_us,
                        accuracy_us: c.accuracy_us,
                    })
                })
                .collect(),
            piconets: sim
                .piconets()
                .map(|p| PiconetMetrics {
                    master: p.master(),
                    slaves: p.slaves().iter().copied().collect(),
                    rate_cap_bps: p.rate_cap_bps(),
                    granted_bps: p.granted_bps().clone(),
                })
                .collect(),
            errors,
            violations: sim.violations().to_vec(),
        }
    }

    /// Pretty JSON with a trailing newline. Field order is fixed by the
    /// struct layout and maps are sorted, so equal reports give equal bytes.
    pub fn to_json(&self) -> String {
        let mut text = serde_json::to_string_pretty(self).expect("metrics always serialize");
        text.push('\n');
        text
    }

    pub fn write(&self, path: &Path) -> Result<(), CliError> {
        fs::write(path, self.to_json()).map_err(|e| CliError::io(path, e))
    }
}
