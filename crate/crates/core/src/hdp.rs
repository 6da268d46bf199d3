//! Health-device application layer: source and sink roles, association,
//! typed measurements and buffering across link loss.
//!
//! A source (the sensor) associates with a sink (the phone or computer)
//! over an open control channel. Association creates one reliable data
//! channel and synchronizes clocks so the sink can map source timestamps to
//! its own clock. Measurements taken while the link is down wait in a
//! bounded source buffer and are flushed, oldest first, once the channel is
//! reconnected.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::address::DeviceAddress;
use crate::link::{LinkId, LinkState};
use crate::mcap::{
    ChannelConfig, ClockSyncResult, CloseMode, ControlChannelId, DataChannelState, McapError, MdlId,
};
use crate::pdu::ControlPdu;
use crate::sim::{PairKey, SimError, Simulation};

/// Payload limit of the measurement channel.
pub const MEASUREMENT_MDL_PAYLOAD: u32 = 256;

const SYNC_ATTEMPTS: u32 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Specialization {
    HeartRate,
    BloodPressure,
    Scale,
    Glucometer,
    Thermometer,
    PulseOximeter,
}

impl Specialization {
    pub const ALL: [Specialization; 6] = [
        Specialization::HeartRate,
        Specialization::BloodPressure,
        Specialization::Scale,
        Specialization::Glucometer,
        Specialization::Thermometer,
        Specialization::PulseOximeter,
    ];

    pub fn code(self) -> u8 {
        match self {
            Specialization::HeartRate => 1,
            Specialization::BloodPressure => 2,
            Specialization::Scale => 3,
            Specialization::Glucometer => 4,
            Specialization::Thermometer => 5,
            Specialization::PulseOximeter => 6,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|s| s.code() == code)
    }

    /// The metrics every measurement of this specialization carries.
    pub fn metrics(self) -> &'static [Metric] {
        match self {
            Specialization::HeartRate => &[
                Metric::HeartRateBpm,
                Metric::FillingDurationMs,
                Metric::AscendingWaveIndexPct,
            ],
            Specialization::BloodPressure => &[
                Metric::SystolicMmHg,
                Metric::DiastolicMmHg,
                Metric::PulseRateBpm,
            ],
            Specialization::Scale => &[Metric::BodyMassKg],
            Specialization::Glucometer => &[Metric::GlucoseMmolL],
            Specialization::Thermometer => &[Metric::BodyTemperatureC],
            Specialization::PulseOximeter => &[Metric::Spo2Pct, Metric::PulseRateBpm],
        }
    }

    /// Configuration identifier announced in the association request.
    pub fn config_id(self) -> u16 {
        0x0100 | u16::from(self.code())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    HeartRateBpm,
    FillingDurationMs,
    AscendingWaveIndexPct,
    SystolicMmHg,
    DiastolicMmHg,
    PulseRateBpm,
    BodyMassKg,
    GlucoseMmolL,
    BodyTemperatureC,
    Spo2Pct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Unit {
    BeatsPerMinute,
    Milliseconds,
    Percent,
    MillimetersOfMercury,
    Kilograms,
    MillimolesPerLiter,
    DegreesCelsius,
}

impl Metric {
    pub const ALL: [Metric; 10] = [
        Metric::HeartRateBpm,
        Metric::FillingDurationMs,
        Metric::AscendingWaveIndexPct,
        Metric::SystolicMmHg,
        Metric::DiastolicMmHg,
        Metric::PulseRateBpm,
        Metric::BodyMassKg,
        Metric::GlucoseMmolL,
        Metric::BodyTemperatureC,
        Metric::Spo2Pct,
    ];

    pub fn code(self) -> u8 {
        match self {
            Metric::HeartRateBpm => 1,
            Metric::FillingDurationMs => 2,
            Metric::AscendingWaveIndexPct => 3,
            Metric::SystolicMmHg => 4,
            Metric::DiastolicMmHg => 5,
            Metric::PulseRateBpm => 6,
            Metric::BodyMassKg => 7,
            Metric::GlucoseMmolL => 8,
            Metric::BodyTemperatureC => 9,
            Metric::Spo2Pct => 10,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.code() == code)
    }

    pub fn unit(self) -> Unit {
        match self {
            Metric::HeartRateBpm | Metric::PulseRateBpm => Unit::BeatsPerMinute,
            Metric::FillingDurationMs => Unit::Milliseconds,
            Metric::AscendingWaveIndexPct | Metric::Spo2Pct => Unit::Percent,
            Metric::SystolicMmHg | Metric::DiastolicMmHg => Unit::MillimetersOfMercury,
            Metric::BodyMassKg => Unit::Kilograms,
            Metric::GlucoseMmolL => Unit::MillimolesPerLiter,
            Metric::BodyTemperatureC => Unit::DegreesCelsius,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("measurement truncated: need {needed} bytes, have {got}")]
    Truncated { needed: usize, got: usize },
    #[error("unknown specialization code {0}")]
    UnknownSpecialization(u8),
    #[error("unknown metric code {0}")]
    UnknownMetric(u8),
    #[error("metric code {0} appears twice")]
    DuplicateMetric(u8),
    #[error("{0} bytes after the last metric")]
    TrailingBytes(usize),
}

/// One reading. Values are scaled by 10 so that 72.5 bpm is stored as 725.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Measurement {
    pub specialization: Specialization,
    pub values: BTreeMap<Metric, i32>,
    /// Source clock when the reading was taken.
    pub source_timestamp_us: u64,
    pub seq: u32,
}

const HEADER_LEN: usize = 4 + 8 + 1 + 1;
const METRIC_LEN: usize = 1 + 4;

impl Measurement {
    /// An unstamped reading; sequence number and timestamp are filled in
    /// when the source submits it.
    pub fn new(
        specialization: Specialization,
        values: impl IntoIterator<Item = (Metric, i32)>,
    ) -> Self {
        Self {
            specialization,
            values: values.into_iter().collect(),
            source_timestamp_us: 0,
            seq: 0,
        }
    }

    /// Pulse-meter reading; every argument is the value times ten.
    pub fn heart_rate(
        bpm_x10: i32,
        filling_duration_ms_x10: i32,
        ascending_wave_index_pct_x10: i32,
    ) -> Self {
        Self::new(
            Specialization::HeartRate,
            [
                (Metric::HeartRateBpm, bpm_x10),
                (Metric::FillingDurationMs, filling_duration_ms_x10),
                (Metric::AscendingWaveIndexPct, ascending_wave_index_pct_x10),
            ],
        )
    }

    pub fn units(&self) -> BTreeMap<Metric, Unit> {
        self.values.keys().map(|m| (*m, m.unit())).collect()
    }

    /// Whether the metric set is exactly the one of the specialization.
    pub fn has_expected_metrics(&self) -> bool {
        let expected: BTreeSet<Metric> = self.specialization.metrics().iter().copied().collect();
        self.values.keys().copied().collect::<BTreeSet<_>>() == expected
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + METRIC_LEN * self.values.len());
        out.extend_from_slice(&self.seq.to_be_bytes());
        out.extend_from_slice(&self.source_timestamp_us.to_be_bytes());
        out.push(self.specialization.code());
        out.push(self.values.len() as u8);
        for (metric, value) in &self.values {
            out.push(metric.code());
            out.extend_from_slice(&value.to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::Truncated {
                needed: HEADER_LEN,
                got: bytes.len(),
            });
        }
        let seq = u32::from_be_bytes(bytes[0..4].try_into().expect("4 bytes"));
        let source_timestamp_us = u64::from_be_bytes(bytes[4..12].try_into().expect("8 bytes"));
        let specialization = Specialization::from_code(bytes[12])
            .ok_or(CodecError::UnknownSpecialization(bytes[12]))?;
        let count = usize::from(bytes[13]);
        let needed = HEADER_LEN + count * METRIC_LEN;
        if bytes.len() < needed {
            return Err(CodecError::Truncated {
                needed,
                got: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(CodecError::TrailingBytes(bytes.len() - needed));
        }
        let mut values = BTreeMap::new();
        for chunk in bytes[HEADER_LEN..].chunks_exact(METRIC_LEN) {
            let metric = Metric::from_code(chunk[0]).ok_or(CodecError::UnknownMetric(chunk[0]))?;
            let value = i32::from_be_bytes(chunk[1..5].try_into().expect("4 bytes"));
            if values.insert(metric, value).is_some() {
                return Err(CodecError::DuplicateMetric(chunk[0]));
            }
        }
        Ok(Self {
            specialization,
            values,
            source_timestamp_us,
            seq,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum HdpRole {
    Source,
    /// `accepts: None` accepts every specialization.
    Sink {
        #[serde(default)]
        accepts: Option<BTreeSet<Specialization>>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    Data,
    Audio,
}

/// Health-device channels never carry audio.
pub fn validate_channel_kind(kind: ChannelKind) -> Result<(), HdpError> {
    match kind {
        ChannelKind::Data => Ok(()),
        ChannelKind::Audio => Err(HdpError::AudioNotSupported),
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum HdpError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Mcap(#[from] McapError),
    #[error("{device} does not have the {expected} role")]
    RoleMismatch {
        device: DeviceAddress,
        expected: &'static str,
    },
    #[error("no control channel between source and sink")]
    NoControlChannel,
    #[error("the link is not authenticated")]
    AuthRequired,
    #[error("sink rejected specialization {0:?}")]
    SpecializationRejected(Specialization),
    #[error("audio channels are not supported")]
    AudioNotSupported,
    #[error("unknown association {0:?}")]
    UnknownAssociation(AssocId),
    #[error("association {0:?} has been released")]
    Released(AssocId),
    #[error("association {0:?} is already released")]
    AlreadyReleased(AssocId),
    #[error("association {0:?} is not operating")]
    NotOperating(AssocId),
    #[error("association carries {expected:?}, measurement is {got:?}")]
    WrongSpecialization {
        expected: Specialization,
        got: Specialization,
    },
    #[error("measurement does not carry the metrics of its specialization")]
    InvalidMetrics,
    #[error("association handshake did not finish in time")]
    Timeout,
}

impl HdpError {
    pub fn kind(&self) -> &'static str {
        match self {
            HdpError::Sim(SimError::UnknownDevice(_)) => "UnknownDevice",
            HdpError::Sim(_) => "Sim",
            HdpError::Mcap(e) => e.kind(),
            HdpError::RoleMismatch { .. } => "RoleMismatch",
            HdpError::NoControlChannel => "NoControlChannel",
            HdpError::AuthRequired => "AuthRequired",
            HdpError::SpecializationRejected(_) => "SpecializationRejected",
            HdpError::AudioNotSupported => "AudioNotSupported",
            HdpError::UnknownAssociation(_) => "UnknownAssociation",
            HdpError::Released(_) => "Released",
            HdpError::AlreadyReleased(_) => "AlreadyReleased",
            HdpError::NotOperating(_) => "NotOperating",
            HdpError::WrongSpecialization { .. } => "WrongSpecialization",
            HdpError::InvalidMetrics => "InvalidMetrics",
            HdpError::Timeout => "Timeout",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AssocId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AssocState {
    Associating,
    Operating,
    Released,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasurementOutcome {
    Acked,
    Buffered,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MeasurementCounters {
    pub sent: u64,
    pub acked: u64,
    pub buffered: u64,
    pub evicted: u64,
    pub delivered: u64,
    pub abandoned: u64,
}

impl MeasurementCounters {
    /// Submitted measurements not yet delivered, evicted or abandoned.
    pub fn in_flight(&self) -> u64 {
        self.sent - self.delivered - self.evicted - self.abandoned
    }

    pub fn add(&mut self, other: &MeasurementCounters) {
        self.sent += other.sent;
        self.acked += other.acked;
        self.buffered += other.buffered;
        self.evicted += other.evicted;
        self.delivered += other.delivered;
        self.abandoned += other.abandoned;
    }
}

/// Bounded queue of measurements waiting for the channel to come back.
#[derive(Debug, Clone)]
pub struct SourceBuffer {
    capacity: usize,
    queue: VecDeque<Measurement>,
}

impl SourceBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            queue: VecDeque::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.queue.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queue.is_empty()
    }

    /// Appends `m`, returning the oldest entry if it had to make room.
    pub fn push(&mut self, m: Measurement) -> Option<Measurement> {
        let evicted = if self.queue.len() >= self.capacity {
            self.queue.pop_front()
        } else {
            None
        };
        self.queue.push_back(m);
        evicted
    }

    pub fn pop(&mut self) -> Option<Measurement> {
        self.queue.pop_front()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Measurement> {
        self.queue.iter()
    }
}

/// A measurement as stored by the sink.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StoredMeasurement {
    pub measurement: Measurement,
    /// Source timestamp mapped onto the sink's clock.
    pub sink_timestamp_us: i64,
    pub received_at_us: u64,
}

#[derive(Debug, Clone, Default)]
struct Handshake {
    response: Option<bool>,
    confirmed: bool,
}

#[derive(Debug, Clone)]
pub struct Association {
    pub(crate) id: AssocId,
    pub(crate) source: DeviceAddress,
    pub(crate) sink: DeviceAddress,
    specialization: Specialization,
    state: AssocState,
    ctrl: ControlChannelId,
    mdl: Option<MdlId>,
    clock_map: Option<ClockSyncResult>,
    next_seq: u32,
    buffer: SourceBuffer,
    sink_log: Vec<StoredMeasurement>,
    counters: MeasurementCounters,
    handshake: Handshake,
}

impl Association {
    pub fn id(&self) -> AssocId {
        self.id
    }

    pub fn source(&self) -> DeviceAddress {
        self.source
    }

    pub fn sink(&self) -> DeviceAddress {
        self.sink
    }

    pub fn specialization(&self) -> Specialization {
        self.specialization
    }

    pub fn state(&self) -> AssocState {
        self.state
    }

    pub fn control_channel(&self) -> ControlChannelId {
        self.ctrl
    }

    /// The reliable channel carrying measurements.
    pub fn reliable_mdl(&self) -> Option<MdlId> {
        self.mdl
    }

    pub fn clock_map(&self) -> Option<ClockSyncResult> {
        self.clock_map
    }

    pub fn buffer(&self) -> &SourceBuffer {
        &self.buffer
    }

    /// Everything the sink has stored, in arrival order.
    pub fn sink_log(&self) -> &[StoredMeasurement] {
        &self.sink_log
    }

    pub fn counters(&self) -> MeasurementCounters {
        self.counters
    }
}

#[derive(Debug, Default)]
pub(crate) struct HdpState {
    roles: BTreeMap<DeviceAddress, HdpRole>,
    pub associations: BTreeMap<AssocId, Association>,
    by_mdl: BTreeMap<(PairKey, MdlId), AssocId>,
    next: u32,
}

enum Submitted {
    InFlight(u32),
    Buffered,
}

impl Simulation {
    pub fn set_hdp_role(&mut self, dev: DeviceAddress, role: HdpRole) -> Result<(), SimError> {
        self.device_state(dev)?;
        self.hdp.roles.insert(dev, role);
        Ok(())
    }

    pub fn hdp_role(&self, dev: DeviceAddress) -> Option<&HdpRole> {
        self.hdp.roles.get(&dev)
    }

    pub fn association(&self, id: AssocId) -> Option<&Association> {
        self.hdp.associations.get(&id)
    }

    pub fn associations(&self) -> impl Iterator<Item = &Association> {
        self.hdp.associations.values()
    }

    fn assoc_mut(&mut self, id: AssocId) -> Result<&mut Association, HdpError> {
        self.hdp
            .associations
            .get_mut(&id)
            .ok_or(HdpError::UnknownAssociation(id))
    }

    /// Associates `source` with `sink` for one specialization: a three
    /// message exchange on the control channel, then a reliable data channel
    /// and a clock synchronization run by the sink.
    pub fn associate(
        &mut self,
        source: DeviceAddress,
        sink: DeviceAddress,
        specialization: Specialization,
    ) -> Result<AssocId, HdpError> {
        self.device_state(source)?;
        self.device_state(sink)?;
        if self.hdp.roles.get(&source) != Some(&HdpRole::Source) {
            return Err(HdpError::RoleMismatch {
                device: source,
                expected: "source",
            });
        }
        if !matches!(self.hdp.roles.get(&sink), Some(HdpRole::Sink { .. })) {
            return Err(HdpError::RoleMismatch {
                device: sink,
                expected: "sink",
            });
        }
        let link = self
            .link_between(source, sink)
            .ok_or(HdpError::NoControlChannel)?;
        let l = self.link(link).expect("indexed");
        if !l.is_authenticated() {
            return Err(HdpError::AuthRequired);
        }
        if l.state() != LinkState::Connected {
            return Err(McapError::LinkDown(link).into());
        }
        let ctrl = PairKey::new(source, sink);
        if self.control_channel(ctrl).is_none() {
            return Err(HdpError::NoControlChannel);
        }

        let id = AssocId(self.hdp.next);
        self.hdp.next += 1;
        self.hdp.associations.insert(
            id,
            Association {
                id,
                source,
                sink,
                specialization,
                state: AssocState::Associating,
                ctrl,
                mdl: None,
                clock_map: None,
                next_seq: 0,
                buffer: SourceBuffer::new(self.config.source_buffer_capacity),
                sink_log: Vec::new(),
                counters: MeasurementCounters::default(),
                handshake: Handshake::default(),
            },
        );
        match self.associate_steps(id, link) {
            Ok(()) => Ok(id),
            Err(err) => {
                self.hdp.associations.remove(&id);
                Err(err)
            }
        }
    }

    fn associate_steps(&mut self, id: AssocId, link: LinkId) -> Result<(), HdpError> {
        let a = &self.hdp.associations[&id];
        let (source, sink, specialization, ctrl) = (a.source, a.sink, a.specialization, a.ctrl);
        self.send_ctrl(
            link,
            source,
            ControlPdu::AssocRequest {
                assoc: id.0,
                specialization,
                config_id: specialization.config_id(),
            },
        );
        let deadline = self.now() + self.config.control_timeout_us;
        self.drive_until(deadline, |sim| {
            let h = &sim.hdp.associations[&id].handshake;
            h.response == Some(false)
                || h.confirmed
                || sim
                    .link(link)
                    .is_none_or(|l| l.state() != LinkState::Connected)
        });
        let h = self.hdp.associations[&id].handshake.clone();
        match h.response {
            Some(false) => return Err(HdpError::SpecializationRejected(specialization)),
            Some(true) if h.confirmed => {}
            _ => {
                if self
                    .link(link)
                    .is_some_and(|l| l.state() != LinkState::Connected)
                {
                    return Err(McapError::LinkDown(link).into());
                }
                return Err(HdpError::Timeout);
            }
        }

        let payload = MEASUREMENT_MDL_PAYLOAD.min(self.config.max_payload_bytes as u32);
        let mdl = self.create_data_channel(ctrl, ChannelConfig::reliable(payload))?;
        self.hdp.by_mdl.insert((ctrl, mdl), id);
        self.assoc_mut(id)?.mdl = Some(mdl);

        let mut sync = Err(McapError::Timeout);
        for _ in 0..SYNC_ATTEMPTS {
            sync = self.sync_clocks_from(ctrl, sink);
            if !matches!(sync, Err(McapError::Timeout)) {
                break;
            }
        }
        let sync = match sync {
            Ok(s) => s,
            Err(err) => {
                self.hdp.by_mdl.remove(&(ctrl, mdl));
                let _ = self.close_channel(ctrl, mdl, CloseMode::Delete);
                return Err(err.into());
            }
        };
        let a = self.assoc_mut(id)?;
        a.clock_map = Some(sync);
        a.state = AssocState::Operating;
        self.trace_event(
            "assoc",
            source,
            json!({
                "assoc": id.0,
                "sink": sink,
                "specialization": specialization,
                "mdl": mdl,
                "offset_us": sync.offset_us,
                "accuracy_us": sync.accuracy_us,
            }),
        );
        Ok(())
    }

    pub(crate) fn on_hdp_ctrl(
        &mut self,
        link: LinkId,
        _from: DeviceAddress,
        to: DeviceAddress,
        body: ControlPdu,
    ) {
        match body {
            ControlPdu::AssocRequest {
                assoc,
                specialization,
                ..
            } => {
                let accepted = match self.hdp.roles.get(&to) {
                    Some(HdpRole::Sink { accepts }) => accepts
                        .as_ref()
                        .is_none_or(|set| set.contains(&specialization)),
                    _ => false,
                };
                self.send_ctrl(link, to, ControlPdu::AssocResponse { assoc, accepted });
            }
            ControlPdu::AssocResponse { assoc, accepted } => {
                let Some(a) = self.hdp.associations.get_mut(&AssocId(assoc)) else {
                    return;
                };
                a.handshake.response = Some(accepted);
                if accepted {
                    self.send_ctrl(link, to, ControlPdu::AssocConfirm { assoc });
                }
            }
            ControlPdu::AssocConfirm { assoc } => {
                if let Some(a) = self.hdp.associations.get_mut(&AssocId(assoc)) {
                    a.handshake.confirmed = true;
                }
            }
            _ => {}
        }
    }

    /// Opens an additional channel on an association. Audio is refused
    /// before anything is sent.
    pub fn open_hdp_channel(
        &mut self,
        id: AssocId,
        kind: ChannelKind,
        config: ChannelConfig,
    ) -> Result<MdlId, HdpError> {
        validate_channel_kind(kind)?;
        let a = self
            .hdp
            .associations
            .get(&id)
            .ok_or(HdpError::UnknownAssociation(id))?;
        if a.state != AssocState::Operating {
            return Err(HdpError::NotOperating(id));
        }
        let ctrl = a.ctrl;
        Ok(self.create_data_channel(ctrl, config)?)
    }

    /// Stamps and sends a measurement without waiting for the ack. When the
    /// channel is down the measurement goes to the source buffer instead.
    pub fn submit_measurement(
        &mut self,
        id: AssocId,
        measurement: Measurement,
    ) -> Result<MeasurementOutcome, HdpError> {
        match self.submit(id, measurement)? {
            Submitted::InFlight(_) => Ok(MeasurementOutcome::Acked),
            Submitted::Buffered => Ok(MeasurementOutcome::Buffered),
        }
    }

    fn submit(&mut self, id: AssocId, mut m: Measurement) -> Result<Submitted, HdpError> {
        let now = self.now();
        let a = self
            .hdp
            .associations
            .get(&id)
            .ok_or(HdpError::UnknownAssociation(id))?;
        match a.state {
            AssocState::Released => return Err(HdpError::Released(id)),
            AssocState::Associating => return Err(HdpError::NotOperating(id)),
            AssocState::Operating => {}
        }
        if m.specialization != a.specialization {
            return Err(HdpError::WrongSpecialization {
                expected: a.specialization,
                got: m.specialization,
            });
        }
        if !m.has_expected_metrics() {
            return Err(HdpError::InvalidMetrics);
        }
        let source = a.source;
        let offset = self.devices[&source].config.clock_offset_us;
        let a = self.hdp.associations.get_mut(&id).expect("checked");
        m.seq = a.next_seq;
        a.next_seq += 1;
        m.source_timestamp_us = now.local_clock(offset).as_micros();
        a.counters.sent += 1;
        let (ctrl, mdl) = (
            a.ctrl,
            a.mdl.expect("operating associations have a channel"),
        );
        let open = a.buffer.is_empty()
            && self
                .data_channel(ctrl, mdl)
                .is_some_and(|d| d.state() == DataChannelState::Open);
        self.trace_event(
            "measurement_tx",
            source,
            json!({ "assoc": id.0, "seq": m.seq, "source_ts_us": m.source_timestamp_us }),
        );
        if open {
            let (seq, _) = self.mdl_send_nowait(ctrl, mdl, source, &m.encode())?;
            Ok(Submitted::InFlight(
                seq.expect("reliable sends are numbered"),
            ))
        } else {
            self.buffer_measurement(id, m);
            Ok(Submitted::Buffered)
        }
    }

    fn buffer_measurement(&mut self, id: AssocId, m: Measurement) {
        let a = self.hdp.associations.get_mut(&id).expect("caller checked");
        let seq = m.seq;
        let evicted = a.buffer.push(m);
        a.counters.buffered += 1;
        let depth = a.buffer.len();
        let source = a.source;
        if let Some(old) = evicted {
            a.counters.evicted += 1;
            self.trace_event("evicted", source, json!({ "assoc": id.0, "seq": old.seq }));
        }
        self.trace_event(
            "buffered",
            source,
            json!({ "assoc": id.0, "seq": seq, "depth": depth }),
        );
    }

    /// Sends a measurement and waits until the sink acknowledges it or the
    /// link goes down, in which case the measurement is held for reconnect.
    pub fn send_measurement(
        &mut self,
        id: AssocId,
        measurement: Measurement,
    ) -> Result<MeasurementOutcome, HdpError> {
        let Submitted::InFlight(seq) = self.submit(id, measurement)? else {
            return Ok(MeasurementOutcome::Buffered);
        };
        let a = &self.hdp.associations[&id];
        let (ctrl, mdl, source) = (a.ctrl, a.mdl.expect("operating"), a.source);
        let waiting = |sim: &Simulation| {
            sim.data_channel(ctrl, mdl).is_some_and(|d| {
                d.state() == DataChannelState::Open && d.unacked_from(source).any(|(s, _)| s == seq)
            })
        };
        let deadline = self.now() + self.config.control_timeout_us;
        self.drive_until(deadline, |sim| !waiting(sim));
        let acked = self
            .data_channel(ctrl, mdl)
            .is_some_and(|d| !d.unacked_from(source).any(|(s, _)| s == seq));
        Ok(if acked {
            MeasurementOutcome::Acked
        } else {
            MeasurementOutcome::Buffered
        })
    }

    /// Ends the association, deletes its channel and counts every
    /// measurement that will now never reach the sink.
    pub fn release(&mut self, id: AssocId) -> Result<u64, HdpError> {
        let a = self
            .hdp
            .associations
            .get(&id)
            .ok_or(HdpError::UnknownAssociation(id))?;
        if a.state == AssocState::Released {
            return Err(HdpError::AlreadyReleased(id));
        }
        let last_delivered = a.sink_log.last().map(|s| s.measurement.seq);
        let (ctrl, mdl, source) = (a.ctrl, a.mdl, a.source);
        let mut abandoned = a.buffer.len() as u64;
        if let Some(d) = mdl.and_then(|m| self.data_channel(ctrl, m)) {
            abandoned += d
                .unacked_from(source)
                .filter_map(|(_, p)| Measurement::decode(p).ok())
                .filter(|m| last_delivered.is_none_or(|last| m.seq > last))
                .count() as u64;
        }
        if let Some(mdl) = mdl {
            self.hdp.by_mdl.remove(&(ctrl, mdl));
            let _ = self.close_channel(ctrl, mdl, CloseMode::Delete);
        }
        let a = self.hdp.associations.get_mut(&id).expect("checked");
        a.buffer = SourceBuffer::new(a.buffer.capacity());
        a.counters.abandoned += abandoned;
        a.state = AssocState::Released;
        self.trace_event(
            "released",
            source,
            json!({ "assoc": id.0, "abandoned": abandoned }),
        );
        Ok(abandoned)
    }

    pub(crate) fn on_link_restored_hdp(&mut self, link: LinkId) {
        let Some(pair) = self.link(link).map(|l| l.pair()) else {
            return;
        };
        let targets: Vec<MdlId> = self
            .hdp
            .associations
            .values()
            .filter(|a| a.ctrl == pair && a.state == AssocState::Operating)
            .filter_map(|a| a.mdl)
            .collect();
        for mdl in targets {
            if let Err(err) = self.begin_reconnect(pair, mdl) {
                log::warn!("reconnect of mdl {mdl} failed to start: {err}");
            }
        }
    }

    pub(crate) fn on_mdl_reconnected(&mut self, pair: PairKey, mdl: MdlId) {
        let Some(&id) = self.hdp.by_mdl.get(&(pair, mdl)) else {
            return;
        };
        loop {
            let open = self
                .data_channel(pair, mdl)
                .is_some_and(|d| d.state() == DataChannelState::Open);
            let a = self.hdp.associations.get_mut(&id).expect("indexed");
            if !open {
                break;
            }
            let Some(m) = a.buffer.pop() else {
                break;
            };
            let source = a.source;
            if let Err(err) = self.mdl_send_nowait(pair, mdl, source, &m.encode()) {
                log::warn!("flush of measurement {} failed: {err}", m.seq);
            }
        }
    }

    pub(crate) fn on_mdl_payload(
        &mut self,
        pair: PairKey,
        mdl: MdlId,
        _from: DeviceAddress,
        to: DeviceAddress,
        payload: &[u8],
    ) {
        let Some(&id) = self.hdp.by_mdl.get(&(pair, mdl)) else {
            return;
        };
        let now = self.now();
        let a = self.hdp.associations.get_mut(&id).expect("indexed");
        if to != a.sink {
            return;
        }
        let m = match Measurement::decode(payload) {
            Ok(m) => m,
            Err(err) => {
                self.violation("wire_format", format!("association {}: {err}", id.0));
                return;
            }
        };
        let previous = a.sink_log.last().map(|s| s.measurement.seq);
        let offset = a.clock_map.map_or(0, |c| c.offset_us);
        let sink_ts = m.source_timestamp_us as i64 - offset;
        let seq = m.seq;
        a.sink_log.push(StoredMeasurement {
            measurement: m,
            sink_timestamp_us: sink_ts,
            received_at_us: now.as_micros(),
        });
        a.counters.delivered += 1;
        let sink = a.sink;
        if previous.is_some_and(|p| seq <= p) {
            self.violation(
                "sink_seq_order",
                format!(
                    "association {} stored seq {seq} after {}",
                    id.0,
                    previous.unwrap_or(0)
                ),
            );
        }
        self.trace_event(
            "measurement_rx",
            sink,
            json!({ "assoc": id.0, "seq": seq, "sink_ts_us": sink_ts }),
        );
    }

    pub(crate) fn on_mdl_acked(
        &mut self,
        pair: PairKey,
        mdl: MdlId,
        sender: DeviceAddress,
        _payload: &[u8],
    ) {
        let Some(&id) = self.hdp.by_mdl.get(&(pair, mdl)) else {
            return;
        };
        if let Some(a) = self.hdp.associations.get_mut(&id) {
            if a.source == sender {
                a.counters.acked += 1;
            }
        }
    }

    /// Counters summed over every association.
    pub fn measurement_totals(&self) -> MeasurementCounters {
        let mut total = MeasurementCounters::default();
        for a in self.hdp.associations.values() {
            total.add(&a.counters);
        }
        total
    }
}
