//! The simulation world: device registry, event dispatch and the glue that
//! moves frames between protocol layers.
//!
//! Protocol operations are added by the `discovery`, `link`, `security`,
//! `mcap` and `hdp` modules as further `impl Simulation` blocks. Operations
//! that wait for a protocol outcome (an inquiry, a page, a handshake) advance
//! simulated time themselves by processing events until the outcome is
//! known; nothing ever blocks on wall-clock time.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};
use thiserror::Error;

use crate::address::DeviceAddress;
use crate::config::SimConfig;
use crate::device::{DeviceConfig, Position};
use crate::discovery::{ConnectabilityMode, DiscoverabilityMode, DiscoveryState};
use crate::engine::{Engine, SimEvent};
use crate::hdp::{AssocId, HdpState, Measurement};
use crate::link::{LinkId, LinkTable};
use crate::mcap::McapState;
use crate::medium::{FrameKind, Listener, Medium, MediumError, MediumModel, RadioFrame};
use crate::pdu::{Envelope, LinkPdu};
use crate::time::SimTime;
use crate::trace::{Trace, TraceRecord};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("device {0} is already registered")]
    DuplicateAddress(DeviceAddress),
    #[error("unknown device {0}")]
    UnknownDevice(DeviceAddress),
    #[error("radio range must be a non-negative number, got {0}")]
    BadRange(f64),
    #[error("invalid configuration: {field} {rule}")]
    InvalidConfig {
        field: &'static str,
        rule: &'static str,
    },
    #[error(transparent)]
    Medium(#[from] MediumError),
}

/// A broken simulation invariant, with the time it was detected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InvariantViolation {
    pub invariant: String,
    pub t_us: u64,
    pub detail: String,
}

/// Unordered pair of devices; identifies a control channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct PairKey {
    low: DeviceAddress,
    high: DeviceAddress,
}

impl PairKey {
    pub fn new(a: DeviceAddress, b: DeviceAddress) -> Self {
        if a <= b {
            Self { low: a, high: b }
        } else {
            Self { low: b, high: a }
        }
    }

    pub fn devices(self) -> (DeviceAddress, DeviceAddress) {
        (self.low, self.high)
    }

    pub fn contains(self, dev: DeviceAddress) -> bool {
        self.low == dev || self.high == dev
    }

    /// The member that is not `dev`.
    pub fn other(self, dev: DeviceAddress) -> DeviceAddress {
        if self.low == dev {
            self.high
        } else {
            self.low
        }
    }
}

/// Actions that can be scheduled to happen at a future simulation time.
#[derive(Debug, Clone, PartialEq)]
pub enum TimedAction {
    MoveDevice {
        device: DeviceAddress,
        position: Position,
    },
    DropLink {
        a: DeviceAddress,
        b: DeviceAddress,
    },
    SetLossProbability(f64),
    SendMeasurement {
        assoc: AssocId,
        measurement: Measurement,
    },
}

/// Who is tuned in for a transmitted frame.
#[derive(Debug, Clone, Copy)]
pub(crate) enum Route {
    Broadcast,
    PageChannel { to: DeviceAddress },
    Link { to: DeviceAddress, link: LinkId },
}

#[derive(Debug, Clone)]
pub(crate) enum Event {
    InquiryTx {
        inquiry: u32,
        slot: u64,
    },
    InquiryEnd {
        inquiry: u32,
    },
    Deliver {
        to: DeviceAddress,
        frame: RadioFrame,
    },
    PageTx {
        page: u32,
    },
    Keepalive {
        link: LinkId,
        generation: u32,
    },
    CtrlRetx {
        link: LinkId,
        id: u64,
    },
    MdlRetx {
        link: LinkId,
        mdl: u16,
        from: DeviceAddress,
        seq: u32,
        epoch: u32,
    },
    SyncTimeout {
        link: LinkId,
        attempt: u32,
    },
    Action(TimedAction),
}

#[derive(Debug, Clone)]
pub(crate) struct DeviceState {
    pub config: DeviceConfig,
    pub discoverability: DiscoverabilityMode,
    /// Set while in limited-discoverable mode.
    pub limited_expiry: Option<SimTime>,
    pub connectability: ConnectabilityMode,
    /// Addresses learned through inquiry.
    pub known: BTreeSet<DeviceAddress>,
    pub active_inquiry: Option<u32>,
    /// Inquirer -> scan window in which this device last answered it.
    pub answered: BTreeMap<DeviceAddress, u64>,
}

/// One simulation run: a fresh engine, medium and protocol state.
pub struct Simulation {
    pub(crate) engine: Engine<Event>,
    pub(crate) medium: Medium,
    pub(crate) rng: ChaCha8Rng,
    pub(crate) config: SimConfig,
    pub(crate) devices: BTreeMap<DeviceAddress, DeviceState>,
    pub(crate) discovery: DiscoveryState,
    pub(crate) links: LinkTable,
    pub(crate) mcap: McapState,
    pub(crate) hdp: HdpState,
    violations: Vec<InvariantViolation>,
}

impl Simulation {
    pub fn new(medium: MediumModel, config: SimConfig) -> Result<Self, SimError> {
        config
            .validate()
            .map_err(|(field, rule)| SimError::InvalidConfig { field, rule })?;
        // Protocol randomness (hop seeds, nonces, jitter) uses its own
        // stream so that it never perturbs the loss sequence.
        let mut rng = ChaCha8Rng::seed_from_u64(medium.rng_seed);
        rng.set_stream(1);
        Ok(Self {
            engine: Engine::new(),
            medium: Medium::new(medium)?,
            rng,
            config,
            devices: BTreeMap::new(),
            discovery: DiscoveryState::default(),
            links: LinkTable::default(),
            mcap: McapState::default(),
            hdp: HdpState::default(),
            violations: Vec::new(),
        })
    }

    pub fn with_seed(seed: u64) -> Self {
        Self::new(
            MediumModel {
                loss_probability: 0.0,
                rng_seed: seed,
            },
            SimConfig::default(),
        )
        .expect("default configuration is valid")
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn now(&self) -> SimTime {
        self.engine.now()
    }

    pub fn trace(&self) -> &Trace {
        self.engine.trace()
    }

    pub fn into_trace(self) -> Trace {
        self.engine.into_trace()
    }

    pub fn medium(&self) -> &Medium {
        &self.medium
    }

    pub fn set_loss_probability(&mut self, p: f64) -> Result<(), SimError> {
        self.medium.set_loss_probability(p)?;
        Ok(())
    }

    pub fn violations(&self) -> &[InvariantViolation] {
        &self.violations
    }

    /// Registers a device: discoverable and connectable until told otherwise.
    pub fn add_device(&mut self, config: DeviceConfig) -> Result<(), SimError> {
        if self.devices.contains_key(&config.address) {
            return Err(SimError::DuplicateAddress(config.address));
        }
        if !config.radio_range_m.is_finite() || config.radio_range_m < 0.0 {
            return Err(SimError::BadRange(config.radio_range_m));
        }
        self.devices.insert(
            config.address,
            DeviceState {
                config,
                discoverability: DiscoverabilityMode::Discoverable,
                limited_expiry: None,
                connectability: ConnectabilityMode::Connectable,
                known: BTreeSet::new(),
                active_inquiry: None,
                answered: BTreeMap::new(),
            },
        );
        Ok(())
    }

    pub fn device(&self, addr: DeviceAddress) -> Option<&DeviceConfig> {
        self.devices.get(&addr).map(|d| &d.config)
    }

    pub fn device_addresses(&self) -> impl Iterator<Item = DeviceAddress> + '_ {
        self.devices.keys().copied()
    }

    pub(crate) fn device_state(&self, addr: DeviceAddress) -> Result<&DeviceState, SimError> {
        self.devices.get(&addr).ok_or(SimError::UnknownDevice(addr))
    }

    pub(crate) fn device_state_mut(
        &mut self,
        addr: DeviceAddress,
    ) -> Result<&mut DeviceState, SimError> {
        self.devices
            .get_mut(&addr)
            .ok_or(SimError::UnknownDevice(addr))
    }

    pub fn move_device(&mut self, addr: DeviceAddress, position: Position) -> Result<(), SimError> {
        let now = self.now();
        let dev = self.device_state_mut(addr)?;
        dev.config.position = position;
        self.record(
            now,
            "move",
            addr,
            json!({ "x": position.x, "y": position.y }),
        );
        Ok(())
    }

    /// Queues an action to run when the clock reaches `at`.
    pub fn schedule_action(&mut self, at: SimTime, action: TimedAction) -> Result<(), SimError> {
        if let TimedAction::MoveDevice { device, .. } = &action {
            self.device_state(*device)?;
        }
        let at = at.max(self.now());
        self.engine
            .schedule(Event::Action(action), at)
            .expect("time clamped to now");
        Ok(())
    }

    /// Processes every event due at or before `t` and leaves the clock at
    /// `t`. Returns the trace records appended meanwhile.
    pub fn run_until(&mut self, t: SimTime) -> &[TraceRecord] {
        let start = self.engine.trace().len();
        let t = t.max(self.now());
        while let Some(ev) = self.engine.pop_due(t) {
            self.handle(ev);
        }
        self.engine.advance_to(t);
        self.engine.trace().since(start)
    }

    /// Processes events until `done` holds or the next event lies beyond
    /// `deadline`. The clock stops at the event that satisfied `done`, or at
    /// `deadline` otherwise.
    pub(crate) fn drive_until<F>(&mut self, deadline: SimTime, mut done: F) -> bool
    where
        F: FnMut(&Simulation) -> bool,
    {
        loop {
            if done(self) {
                return true;
            }
            match self.engine.pop_due(deadline) {
                Some(ev) => self.handle(ev),
                None => {
                    self.engine.advance_to(deadline);
                    return done(self);
                }
            }
        }
    }

    /// Appends an arbitrary record to the trace at the current time.
    pub fn trace_event(&mut self, ev: &str, dev: DeviceAddress, detail: Value) {
        let now = self.now();
        self.record(now, ev, dev, detail);
    }

    pub(crate) fn record(&mut self, at: SimTime, ev: &str, dev: DeviceAddress, detail: Value) {
        log::debug!("{at} {dev} {ev} {detail}");
        self.engine.trace_mut().record(at, ev, dev, detail);
    }

    /// Records a broken invariant at the current time.
    pub fn violation(&mut self, invariant: &str, detail: String) {
        let t_us = self.now().as_micros();
        log::error!("invariant {invariant} violated at {t_us}us: {detail}");
        self.violations.push(InvariantViolation {
            invariant: invariant.to_string(),
            t_us,
            detail,
        });
    }

    pub(crate) fn random_bytes<const N: usize>(&mut self) -> [u8; N] {
        let mut out = [0u8; N];
        self.rng.fill_bytes(&mut out);
        out
    }

    pub(crate) fn random_jitter(&mut self, bound: u64) -> i64 {
        if bound == 0 {
            return 0;
        }
        let b = bound as i64;
        self.rng.gen_range(-b..=b)
    }

    /// Puts a frame on the air. The route says who is tuned in for it; the
    /// medium still decides reachability and loss. Returns the number of
    /// copies that will arrive.
    pub(crate) fn transmit(
        &mut self,
        from: DeviceAddress,
        kind: FrameKind,
        freq: u8,
        route: Route,
        payload: Vec<u8>,
    ) -> usize {
        let now = self.now();
        let frame = RadioFrame::new(from, freq, kind, payload).expect("frequency in range");
        let Some(sender) = self.devices.get(&from) else {
            return 0;
        };
        let sender = sender.config.clone();
        let listening: Vec<(DeviceAddress, bool)> = self
            .devices
            .keys()
            .map(|&addr| (addr, self.is_listening(addr, &frame, route, now)))
            .collect();
        let deliveries = self.medium.broadcast(
            &frame,
            &sender,
            listening.iter().map(|(addr, listening)| Listener {
                config: &self.devices[addr].config,
                listening: *listening,
            }),
            now,
        );
        let n = deliveries.len();
        for d in deliveries {
            self.engine
                .schedule(
                    Event::Deliver {
                        to: d.to,
                        frame: frame.clone(),
                    },
                    d.at,
                )
                .expect("deliveries are in the future");
        }
        n
    }

    pub(crate) fn send_pdu(
        &mut self,
        from: DeviceAddress,
        to: DeviceAddress,
        freq: u8,
        pdu: LinkPdu,
    ) -> usize {
        let kind = match pdu {
            LinkPdu::PageRequest { .. } => FrameKind::Page,
            _ => FrameKind::LinkData,
        };
        let route = match pdu.link() {
            Some(link) => Route::Link { to, link },
            None => Route::PageChannel { to },
        };
        let payload = Envelope { to, pdu }.encode();
        self.transmit(from, kind, freq, route, payload)
    }

    fn is_listening(
        &self,
        receiver: DeviceAddress,
        frame: &RadioFrame,
        route: Route,
        now: SimTime,
    ) -> bool {
        if receiver == frame.from {
            return false;
        }
        let freq = frame.freq_index();
        match (frame.kind, route) {
            (FrameKind::Inquiry, _) => self.hears_inquiry(receiver, freq, now),
            (FrameKind::InquiryResponse, _) => self.is_inquiring(receiver),
            (_, Route::Broadcast) => false,
            (FrameKind::Page, Route::PageChannel { to }) => {
                to == receiver && self.scan_frequency_of(receiver, now) == freq
            }
            (_, Route::PageChannel { to }) => {
                to == receiver && self.page_channel_matches(frame.from, receiver, freq, now)
            }
            (_, Route::Link { to, link }) => {
                to == receiver && self.link_listening(link, receiver, freq, now)
            }
        }
    }

    fn handle(&mut self, ev: SimEvent<Event>) {
        match ev.kind {
            Event::InquiryTx { inquiry, slot } => self.on_inquiry_tx(inquiry, slot),
            Event::InquiryEnd { inquiry } => self.finish_inquiry(inquiry),
            Event::Deliver { to, frame } => self.on_deliver(to, frame),
            Event::PageTx { page } => self.on_page_tx(page),
            Event::Keepalive { link, generation } => self.on_keepalive_tick(link, generation),
            Event::CtrlRetx { link, id } => self.on_ctrl_retx(link, id),
            Event::MdlRetx {
                link,
                mdl,
                from,
                seq,
                epoch,
            } => self.on_mdl_retx(link, mdl, from, seq, epoch),
            Event::SyncTimeout { link, attempt } => self.on_sync_timeout(link, attempt),
            Event::Action(action) => self.apply_action(action),
        }
    }

    fn apply_action(&mut self, action: TimedAction) {
        match action {
            TimedAction::MoveDevice { device, position } => {
                // Validated when scheduled.
                let _ = self.move_device(device, position);
            }
            TimedAction::DropLink { a, b } => {
                if let Some(link) = self.link_between(a, b) {
                    self.lose_link(link, "dropped");
                }
            }
            TimedAction::SetLossProbability(p) => {
                if self.medium.set_loss_probability(p).is_err() {
                    self.violation("loss_probability", format!("rejected value {p}"));
                }
            }
            TimedAction::SendMeasurement { assoc, measurement } => {
                if let Err(err) = self.submit_measurement(assoc, measurement) {
                    let dev = self
                        .hdp
                        .associations
                        .get(&assoc)
                        .map(|a| a.source)
                        .unwrap_or(DeviceAddress::new(0).expect("zero address"));
                    self.trace_event(
                        "error",
                        dev,
                        json!({ "op": "send_measurement", "error": err.kind(), "message": err.to_string() }),
                    );
                }
            }
        }
    }

    fn on_deliver(&mut self, to: DeviceAddress, frame: RadioFrame) {
        match frame.kind {
            FrameKind::Inquiry => self.on_inquiry_frame(to, &frame),
            FrameKind::InquiryResponse => self.on_inquiry_response(to, &frame),
            FrameKind::Page | FrameKind::LinkData => {
                let Some(env) = Envelope::decode(&frame.payload) else {
                    return;
                };
                if env.to != to {
                    return;
                }
                self.on_link_pdu(frame.from, to, env.pdu);
            }
        }
    }

    fn on_link_pdu(&mut self, from: DeviceAddress, to: DeviceAddress, pdu: LinkPdu) {
        match pdu {
            LinkPdu::PageRequest { page } => self.on_page_request(from, to, page),
            LinkPdu::PageAccept { page } => self.on_page_accept(from, page),
            LinkPdu::Keepalive { link, n } => self.on_keepalive(link, from, to, n),
            LinkPdu::KeepaliveAck { link, n } => self.on_keepalive_ack(link, n),
            LinkPdu::Ctrl { link, id, body } => self.on_ctrl(link, from, to, id, body),
            LinkPdu::CtrlAck { link, id } => self.on_ctrl_ack(link, id),
            LinkPdu::MdlData {
                link,
                mdl,
                seq,
                clock_us,
                data,
            } => self.on_mdl_data(link, mdl, from, to, seq, clock_us, data),
            LinkPdu::MdlAck { link, mdl, seq } => self.on_mdl_ack(link, mdl, to, seq),
            LinkPdu::SyncRequest { link, attempt, t0 } => {
                self.on_sync_request(link, from, to, attempt, t0)
            }
            LinkPdu::SyncReply {
                link,
                attempt,
                t0,
                t1,
            } => self.on_sync_reply(link, to, attempt, t0, t1),
        }
    }

    /// Structural topology checks, run after every topology change.
    pub(crate) fn check_topology(&mut self) {
        let mut problems = Vec::new();
        for (master, piconet) in self.links.piconets() {
            if piconet.slaves().len() > crate::link::MAX_ACTIVE_SLAVES {
                problems.push((
                    "piconet_slave_cap",
                    format!("{master} has {} slaves", piconet.slaves().len()),
                ));
            }
            if piconet.slaves().contains(master) {
                problems.push(("master_not_slave", format!("{master} is its own slave")));
            }
        }
        for (invariant, detail) in problems {
            self.violation(invariant, detail);
        }
    }
}
