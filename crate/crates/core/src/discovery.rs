//! Inquiry scanning and the three response modes.
//!
//! Every device not itself inquiring listens on one of the 32 discovery
//! frequencies per scan window, moving to the next frequency each window.
//! An inquirer sweeps all 32 frequencies once per inquiry cycle. A scanner
//! that hears an inquiry answers with its address and name if its
//! discoverability mode permits at that instant.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::address::{DeviceAddress, DeviceName};
use crate::medium::{FrameKind, RadioFrame, FREQ_COUNT};
use crate::sim::{Event, Route, SimError, Simulation};
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiscoveryError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("limited discoverable window must be positive")]
    ZeroWindow,
    #[error("inquiry duration must be positive")]
    ZeroDuration,
    #[error("{0} is already inquiring")]
    InquiryInProgress(DeviceAddress),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscoverabilityMode {
    /// Always answers inquiries.
    Discoverable,
    /// Answers only until `window_us` after the mode was set.
    LimitedDiscoverable { window_us: u64 },
    /// Never answers.
    NonDiscoverable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectabilityMode {
    Connectable,
    /// Page frames are ignored. Inquiry answers are still governed by the
    /// discoverability mode alone.
    NonConnectable,
}

/// Inquiry-scan schedule shared by all devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanSchedule {
    pub window_us: u64,
    pub freq_count: u8,
}

impl Default for ScanSchedule {
    fn default() -> Self {
        Self {
            window_us: 1_280_000,
            freq_count: FREQ_COUNT,
        }
    }
}

impl ScanSchedule {
    pub fn window_index(&self, now: SimTime, phase_us: u64) -> u64 {
        (now.as_micros() + phase_us) / self.window_us
    }

    /// Frequency a scanner listens on at `now`.
    pub fn frequency_at(&self, now: SimTime, phase_us: u64) -> u8 {
        scan_frequency(self.window_index(now, phase_us))
    }

    /// Time for a scanner to visit every frequency once.
    pub fn full_sweep_us(&self) -> u64 {
        self.window_us * u64::from(self.freq_count)
    }
}

/// Frequency listened on during scan window `window_index`.
pub fn scan_frequency(window_index: u64) -> u8 {
    (window_index % u64::from(FREQ_COUNT)) as u8
}

/// Offset of frequency slot `slot` (0..32) inside one inquiry cycle.
///
/// The cycle is split into 32 whole-microsecond steps of `cycle/32` rounded
/// to nearest; the last slot takes whatever remains.
pub fn inquiry_slot_offset(cycle_us: u64, slot: u8) -> u64 {
    let n = u64::from(FREQ_COUNT);
    let step = ((cycle_us + n / 2) / n)
        .min((cycle_us - 1) / (n - 1))
        .max(1);
    step * u64::from(slot)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct DiscoveryResult {
    pub address: DeviceAddress,
    pub name: DeviceName,
    pub discovered_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InquiryParams {
    pub duration_us: u64,
    /// Stop as soon as this many distinct devices have answered.
    pub max_responses: Option<usize>,
}

impl InquiryParams {
    pub fn new(duration_us: u64) -> Self {
        Self {
            duration_us,
            max_responses: None,
        }
    }
}

/// Summary of one finished or running inquiry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InquiryRecord {
    pub inquirer: DeviceAddress,
    pub started: SimTime,
    pub results: Vec<DiscoveryResult>,
    pub finished: bool,
}

impl InquiryRecord {
    /// Time from the start of the inquiry to its first answer.
    pub fn first_latency_us(&self) -> Option<u64> {
        self.results
            .iter()
            .map(|r| r.discovered_at - self.started)
            .min()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Inquiry {
    inquirer: DeviceAddress,
    started: SimTime,
    ends_at: SimTime,
    max_responses: Option<usize>,
    results: BTreeMap<DeviceAddress, DiscoveryResult>,
    finished: bool,
}

impl Inquiry {
    fn sorted_results(&self) -> Vec<DiscoveryResult> {
        let mut out: Vec<DiscoveryResult> = self.results.values().cloned().collect();
        out.sort_by_key(|r| (r.discovered_at, r.address));
        out
    }
}

#[derive(Debug, Default)]
pub(crate) struct DiscoveryState {
    inquiries: BTreeMap<u32, Inquiry>,
    next_id: u32,
}

impl Simulation {
    pub fn scan_schedule(&self) -> ScanSchedule {
        ScanSchedule {
            window_us: self.config.scan_window_us,
            freq_count: FREQ_COUNT,
        }
    }

    pub fn set_discoverability(
        &mut self,
        dev: DeviceAddress,
        mode: DiscoverabilityMode,
    ) -> Result<(), DiscoveryError> {
        if mode == (DiscoverabilityMode::LimitedDiscoverable { window_us: 0 }) {
            return Err(DiscoveryError::ZeroWindow);
        }
        let now = self.now();
        let state = self.device_state_mut(dev)?;
        state.discoverability = mode;
        state.limited_expiry = match mode {
            DiscoverabilityMode::LimitedDiscoverable { window_us } => Some(now + window_us),
            _ => None,
        };
        let expiry = state.limited_expiry.map(SimTime::as_micros);
        self.record(
            now,
            "mode",
            dev,
            json!({ "discoverability": mode, "expiry_us": expiry }),
        );
        Ok(())
    }

    pub fn set_connectability(
        &mut self,
        dev: DeviceAddress,
        mode: ConnectabilityMode,
    ) -> Result<(), DiscoveryError> {
        let now = self.now();
        self.device_state_mut(dev)?.connectability = mode;
        self.record(now, "mode", dev, json!({ "connectability": mode }));
        Ok(())
    }

    pub fn discoverability(&self, dev: DeviceAddress) -> Option<DiscoverabilityMode> {
        self.devices.get(&dev).map(|d| d.discoverability)
    }

    pub fn connectability(&self, dev: DeviceAddress) -> Option<ConnectabilityMode> {
        self.devices.get(&dev).map(|d| d.connectability)
    }

    /// Whether `dev` would answer an inquiry arriving right now.
    pub fn answers_inquiries(&self, dev: DeviceAddress) -> bool {
        let Some(state) = self.devices.get(&dev) else {
            return false;
        };
        match state.discoverability {
            DiscoverabilityMode::Discoverable => true,
            DiscoverabilityMode::LimitedDiscoverable { .. } => state
                .limited_expiry
                .is_some_and(|expiry| self.now() < expiry),
            DiscoverabilityMode::NonDiscoverable => false,
        }
    }

    /// Addresses `dev` has learned through inquiry.
    pub fn known_devices(&self, dev: DeviceAddress) -> Vec<DeviceAddress> {
        self.devices
            .get(&dev)
            .map(|d| d.known.iter().copied().collect())
            .unwrap_or_default()
    }

    /// Runs an inquiry for `duration_us` and returns every device that
    /// answered, earliest first.
    pub fn start_inquiry(
        &mut self,
        dev: DeviceAddress,
        duration_us: u64,
    ) -> Result<Vec<DiscoveryResult>, DiscoveryError> {
        self.inquire(dev, InquiryParams::new(duration_us))
    }

    pub fn inquire(
        &mut self,
        dev: DeviceAddress,
        params: InquiryParams,
    ) -> Result<Vec<DiscoveryResult>, DiscoveryError> {
        let id = self.begin_inquiry(dev, params)?;
        let deadline = self.now() + params.duration_us;
        self.drive_until(deadline, |sim| sim.discovery.inquiries[&id].finished);
        Ok(self.discovery.inquiries[&id].sorted_results())
    }

    /// Starts an inquiry without waiting for it; results accumulate as the
    /// simulation runs.
    pub fn begin_inquiry(
        &mut self,
        dev: DeviceAddress,
        params: InquiryParams,
    ) -> Result<u32, DiscoveryError> {
        if params.duration_us == 0 {
            return Err(DiscoveryError::ZeroDuration);
        }
        let now = self.now();
        let state = self.device_state_mut(dev)?;
        if state.active_inquiry.is_some() {
            return Err(DiscoveryError::InquiryInProgress(dev));
        }
        let id = self.discovery.next_id;
        self.discovery.next_id += 1;
        self.devices.get_mut(&dev).expect("checked").active_inquiry = Some(id);
        self.discovery.inquiries.insert(
            id,
            Inquiry {
                inquirer: dev,
                started: now,
                ends_at: now + params.duration_us,
                max_responses: params.max_responses,
                results: BTreeMap::new(),
                finished: false,
            },
        );
        self.record(
            now,
            "inquiry_start",
            dev,
            json!({ "inquiry": id, "duration_us": params.duration_us }),
        );
        self.engine
            .schedule(Event::InquiryEnd { inquiry: id }, now + params.duration_us)
            .expect("future");
        self.on_inquiry_tx(id, 0);
        Ok(id)
    }

    pub fn inquiry_records(&self) -> Vec<InquiryRecord> {
        self.discovery
            .inquiries
            .values()
            .map(|inq| InquiryRecord {
                inquirer: inq.inquirer,
                started: inq.started,
                results: inq.sorted_results(),
                finished: inq.finished,
            })
            .collect()
    }

    pub(crate) fn is_inquiring(&self, dev: DeviceAddress) -> bool {
        self.devices
            .get(&dev)
            .is_some_and(|d| d.active_inquiry.is_some())
    }

    pub(crate) fn scan_frequency_of(&self, dev: DeviceAddress, now: SimTime) -> u8 {
        let phase = self.devices.get(&dev).map_or(0, |d| d.config.scan_phase_us);
        self.scan_schedule().frequency_at(now, phase)
    }

    pub(crate) fn hears_inquiry(&self, dev: DeviceAddress, freq: u8, now: SimTime) -> bool {
        !self.is_inquiring(dev) && self.scan_frequency_of(dev, now) == freq
    }

    pub(crate) fn on_inquiry_tx(&mut self, id: u32, slot: u64) {
        let Some(inq) = self.discovery.inquiries.get(&id) else {
            return;
        };
        if inq.finished {
            return;
        }
        let (inquirer, started, ends_at) = (inq.inquirer, inq.started, inq.ends_at);
        let cycle_us = self.config.inquiry_cycle_us;
        let n = u64::from(FREQ_COUNT);
        let freq = (slot % n) as u8;
        if freq == 0 {
            self.record(
                self.now(),
                "inquiry_tx",
                inquirer,
                json!({ "inquiry": id, "cycle": slot / n }),
            );
        }
        self.transmit(
            inquirer,
            FrameKind::Inquiry,
            freq,
            Route::Broadcast,
            Vec::new(),
        );

        let next = slot + 1;
        let at = started + (next / n) * cycle_us + inquiry_slot_offset(cycle_us, (next % n) as u8);
        if at < ends_at {
            self.engine
                .schedule(
                    Event::InquiryTx {
                        inquiry: id,
                        slot: next,
                    },
                    at,
                )
                .expect("slots move forward");
        }
    }

    pub(crate) fn on_inquiry_frame(&mut self, to: DeviceAddress, frame: &RadioFrame) {
        if !self.answers_inquiries(to) {
            return;
        }
        let now = self.now();
        let schedule = self.scan_schedule();
        let state = &self.devices[&to];
        let window = schedule.window_index(now, state.config.scan_phase_us);
        // One answer per inquirer per scan window.
        if state.answered.get(&frame.from) == Some(&window) {
            return;
        }
        let name = state.config.name.as_str().as_bytes().to_vec();
        self.devices
            .get_mut(&to)
            .expect("receiver registered")
            .answered
            .insert(frame.from, window);
        self.record(
            now,
            "inquiry_resp",
            to,
            json!({ "inquirer": frame.from, "freq": frame.freq_index() }),
        );
        self.transmit(
            to,
            FrameKind::InquiryResponse,
            frame.freq_index(),
            Route::Broadcast,
            name,
        );
    }

    pub(crate) fn on_inquiry_response(&mut self, to: DeviceAddress, frame: &RadioFrame) {
        let Some(id) = self.devices.get(&to).and_then(|d| d.active_inquiry) else {
            return;
        };
        let now = self.now();
        let inq = self
            .discovery
            .inquiries
            .get_mut(&id)
            .expect("active inquiry");
        if inq.results.contains_key(&frame.from) {
            return;
        }
        inq.results.insert(
            frame.from,
            DiscoveryResult {
                address: frame.from,
                name: DeviceName::from_wire(&frame.payload),
                discovered_at: now,
            },
        );
        let full = inq
            .max_responses
            .is_some_and(|max| inq.results.len() >= max);
        self.devices
            .get_mut(&to)
            .expect("inquirer registered")
            .known
            .insert(frame.from);
        if full {
            self.finish_inquiry(id);
        }
    }

    pub(crate) fn finish_inquiry(&mut self, id: u32) {
        let Some(inq) = self.discovery.inquiries.get_mut(&id) else {
            return;
        };
        if inq.finished {
            return;
        }
        inq.finished = true;
        let inquirer = inq.inquirer;
        let found: Vec<DeviceAddress> = inq.sorted_results().iter().map(|r| r.address).collect();
        if let Some(dev) = self.devices.get_mut(&inquirer) {
            dev.active_inquiry = None;
        }
        let now = self.now();
        self.record(
            now,
            "inquiry_done",
            inquirer,
            json!({ "inquiry": id, "found": found }),
        );
    }
}
