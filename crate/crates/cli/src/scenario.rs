//! Scenario files: JSON description of devices, medium, PINs and a timeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use hdpsim::address::format_address;
use hdpsim::discovery::{ConnectabilityMode, DiscoverabilityMode};
use hdpsim::hdp::Specialization;
use hdpsim::{DeviceAddress, DeviceConfig, DeviceName, HdpRole, Pin, Position, SimConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    pub devices: Vec<DeviceSpec>,
    #[serde(default)]
    pub medium: MediumSpec,
    #[serde(default)]
    pub security: SecuritySpec,
    #[serde(default)]
    pub timeline: Vec<Step>,
    /// Timer and limit overrides; unspecified fields keep their defaults.
    #[serde(default)]
    pub overrides: SimConfig,
    /// Simulated time at which the run stops. Defaults to the time of the
    /// last timeline step.
    #[serde(default)]
    pub duration_us: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub address: DeviceAddress,
    #[serde(default)]
    pub name: DeviceName,
    #[serde(default)]
    pub position: Position,
    #[serde(default = "default_range")]
    pub radio_range_m: f64,
    #[serde(default)]
    pub clock_offset_us: i64,
    #[serde(default)]
    pub clock_jitter_us: u64,
    #[serde(default)]
    pub scan_phase_us: u64,
    #[serde(default)]
    pub discoverability: Option<DiscoverabilityMode>,
    #[serde(default)]
    pub connectability: Option<ConnectabilityMode>,
    #[serde(default)]
    pub hdp_role: Option<HdpRole>,
}

fn default_range() -> f64 {
    10.0
}

impl DeviceSpec {
    pub fn config(&self) -> DeviceConfig {
        DeviceConfig::new(self.address, self.name.clone(), self.position)
            .with_range(self.radio_range_m)
            .with_clock_offset(self.clock_offset_us)
            .with_clock_jitter(self.clock_jitter_us)
            .with_scan_phase(self.scan_phase_us)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MediumSpec {
    #[serde(default)]
    pub loss_probability: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SecuritySpec {
    #[serde(default)]
    pub pins: Vec<PinSpec>,
}

/// PINs entered on the two devices of a pair. `peer_pin` is what `b` uses
/// and defaults to `pin`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PinSpec {
    pub a: DeviceAddress,
    pub b: DeviceAddress,
    pub pin: String,
    #[serde(default)]
    pub peer_pin: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Step {
    pub at_us: u64,
    pub action: Action,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Action {
    SetMode {
        device: DeviceAddress,
        #[serde(default)]
        discoverability: Option<DiscoverabilityMode>,
        #[serde(default)]
        connectability: Option<ConnectabilityMode>,
    },
    StartInquiry {
        device: DeviceAddress,
        duration_us: u64,
        #[serde(default)]
        max_responses: Option<usize>,
    },
    Page {
        master: DeviceAddress,
        target: DeviceAddress,
    },
    Pair {
        a: DeviceAddress,
        b: DeviceAddress,
    },
    /// Opens the control channel if needed, then associates.
    Associate {
        source: DeviceAddress,
        sink: DeviceAddress,
        specialization: Specialization,
    },
    /// `count` heart-rate readings, `interval_us` apart. Each value is drawn
    /// uniformly within `spread` of its base value.
    SendMeasurements {
        source: DeviceAddress,
        sink: DeviceAddress,
        count: u32,
        interval_us: u64,
        #[serde(default)]
        reading: Reading,
    },
    MoveDevice {
        device: DeviceAddress,
        position: Position,
    },
    DropLink {
        a: DeviceAddress,
        b: DeviceAddress,
    },
    SetLoss {
        loss_probability: f64,
    },
    Release {
        source: DeviceAddress,
        sink: DeviceAddress,
    },
    RunUntil {},
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Reading {
    pub heart_rate_bpm: f64,
    pub filling_duration_ms: f64,
    pub ascending_wave_index_pct: f64,
    #[serde(default)]
    pub spread: f64,
}

impl Default for Reading {
    fn default() -> Self {
        Self {
            heart_rate_bpm: 72.0,
            filling_duration_ms: 210.0,
            ascending_wave_index_pct: 28.0,
            spread: 0.0,
        }
    }
}

impl Action {
    fn addresses(&self) -> Vec<(&'static str, DeviceAddress)> {
        match *self {
            Action::SetMode { device, .. }
            | Action::StartInquiry { device, .. }
            | Action::MoveDevice { device, .. } => vec![("device", device)],
            Action::Page { master, target } => vec![("master", master), ("target", target)],
            Action::Pair { a, b } | Action::DropLink { a, b } => vec![("a", a), ("b", b)],
            Action::Associate { source, sink, .. }
            | Action::SendMeasurements { source, sink, .. }
            | Action::Release { source, sink } => vec![("source", source), ("sink", sink)],
            Action::SetLoss { .. } | Action::RunUntil {} => Vec::new(),
        }
    }
}

fn invalid(field: impl Into<String>, rule: impl Into<String>) -> CliError {
    CliError::Validation {
        field: field.into(),
        rule: rule.into(),
    }
}

fn check_loss(field: &str, p: f64) -> Result<(), CliError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(invalid(field, "must be between 0 and 1"))
    }
}

fn check_mode(field: String, mode: Option<DiscoverabilityMode>) -> Result<(), CliError> {
    if mode == Some(DiscoverabilityMode::LimitedDiscoverable { window_us: 0 }) {
        return Err(invalid(field, "limited window must be positive"));
    }
    Ok(())
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self, CliError> {
        let scenario: Scenario = serde_json::from_str(text).map_err(|e| CliError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        scenario.validate()?;
        Ok(scenario)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_json(&text)
    }

    /// Checks every cross-reference and numeric rule.
    pub fn validate(&self) -> Result<(), CliError> {
        if self.devices.is_empty() {
            return Err(invalid("devices", "must not be empty"));
        }
        let mut roles = BTreeMap::new();
        for (i, d) in self.devices.iter().enumerate() {
            if roles.insert(d.address, d.hdp_role.clone()).is_some() {
                return Err(invalid(
                    format!("devices[{i}].address"),
                    format!("duplicate address {}", format_address(d.address)),
                ));
            }
            if !d.radio_range_m.is_finite() || d.radio_range_m < 0.0 {
                return Err(invalid(
                    format!("devices[{i}].radio_range_m"),
                    "must be a non-negative number",
                ));
            }
            if !d.position.x.is_finite() || !d.position.y.is_finite() {
                return Err(invalid(format!("devices[{i}].position"), "must be finite"));
            }
            check_mode(format!("devices[{i}].discoverability"), d.discoverability)?;
        }
        let defined = |field: String, addr: DeviceAddress| {
            if roles.contains_key(&addr) {
                Ok(())
            } else {
                Err(invalid(
                    field,
                    format!("undefined address {}", format_address(addr)),
                ))
            }
        };
        check_loss("medium.loss_probability", self.medium.loss_probability)?;
        self.overrides
            .validate()
            .map_err(|(field, rule)| invalid(format!("overrides.{field}"), rule))?;

        let mut pinned = BTreeSet::new();
        for (i, p) in self.security.pins.iter().enumerate() {
            defined(format!("security.pins[{i}].a"), p.a)?;
            defined(format!("security.pins[{i}].b"), p.b)?;
            Pin::new(p.pin.as_bytes())
                .map_err(|e| invalid(format!("security.pins[{i}].pin"), e.to_string()))?;
            if let Some(peer) = &p.peer_pin {
                Pin::new(peer.as_bytes())
                    .map_err(|e| invalid(format!("security.pins[{i}].peer_pin"), e.to_string()))?;
            }
            pinned.insert(hdpsim::PairKey::new(p.a, p.b));
        }

        let mut last = 0;
        for (i, step) in self.timeline.iter().enumerate() {
            if step.at_us < last {
                return Err(invalid(
                    format!("timeline[{i}].at_us"),
                    "timeline not sorted",
                ));
            }
            last = step.at_us;
            for (name, addr) in step.action.addresses() {
                defined(format!("timeline[{i}].action.{name}"), addr)?;
            }
            let field = |name: &str| format!("timeline[{i}].action.{name}");
            match &step.action {
                Action::SetMode {
                    discoverability, ..
                } => check_mode(field("discoverability"), *discoverability)?,
                Action::StartInquiry { duration_us, .. } if *duration_us == 0 => {
                    return Err(invalid(field("duration_us"), "must be positive"));
                }
                Action::Pair { a, b } if !pinned.contains(&hdpsim::PairKey::new(*a, *b)) => {
                    return Err(invalid(field("a"), "no PIN configured for this pair"));
                }
                Action::Associate { source, sink, .. }
                | Action::SendMeasurements { source, sink, .. }
                | Action::Release { source, sink } => {
                    if !matches!(roles[source], Some(HdpRole::Source)) {
                        return Err(invalid(field("source"), "device is not an HDP source"));
                    }
                    if !matches!(roles[sink], Some(HdpRole::Sink { .. })) {
                        return Err(invalid(field("sink"), "device is not an HDP sink"));
                    }
                    if let Action::SendMeasurements {
                        count,
                        interval_us,
                        reading,
                        ..
                    } = &step.action
                    {
                        if *count == 0 {
                            return Err(invalid(field("count"), "must be positive"));
                        }
                        if *count > 1 && *interval_us == 0 {
                            return Err(invalid(field("interval_us"), "must be positive"));
                        }
                        let values = [
                            reading.heart_rate_bpm,
                            reading.filling_duration_ms,
                            reading.ascending_wave_index_pct,
                            reading.spread,
                        ];
                        if values
                            .iter()
                            .any(|v| !v.is_finite() || *v < 0.0 || *v * 10.0 > f64::from(i32::MAX))
                        {
                            return Err(invalid(
                                field("reading"),
                                "values must be non-negative and in range",
                            ));
                        }
                    }
                }
                Action::MoveDevice { position, .. }
                    if !position.x.is_finite() || !position.y.is_finite() =>
                {
                    return Err(invalid(field("position"), "must be finite"));
                }
                Action::SetLoss { loss_probability } => {
                    check_loss(&field("loss_probability"), *loss_probability)?
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn pins_for(&self, a: DeviceAddress, b: DeviceAddress) -> Option<(Pin, Pin)> {
        let spec = self
            .security
            .pins
            .iter()
            .find(|p| hdpsim::PairKey::new(p.a, p.b) == hdpsim::PairKey::new(a, b))?;
        let pin = Pin::new(spec.pin.as_bytes()).ok()?;
        let peer = match &spec.peer_pin {
            Some(p) => Pin::new(p.as_bytes()).ok()?,
            None => pin.clone(),
        };
        // The entry may list the pair in either order.
        if spec.a == a {
            Some((pin, peer))
        } else {
            Some((peer, pin))
        }
    }

    /// Time at which a run stops when no explicit limit is given.
    pub fn end_us(&self) -> u64 {
        let last = self.timeline.last().map_or(0, |s| s.at_us);
        self.duration_us.unwrap_or(last).max(last)
    }
}
