//! Channel management over an authenticated link.
//!
//! Each device pair has at most one control channel. Data channels (MDLs)
//! are created with a four-message handshake and keep their identity and
//! configuration across link loss, so that a later reconnect needs only two
//! messages. Reliable channels hold unacknowledged payloads while suspended
//! and flush them in order once reconnected.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::address::DeviceAddress;
use crate::link::{LinkError, LinkId, LinkState};
use crate::medium::PROPAGATION_DELAY_US;
use crate::pdu::{ControlPdu, LinkPdu};
use crate::security::apply_cipher;
use crate::sim::{Event, PairKey, Simulation};
use crate::time::SimTime;

pub type MdlId = u16;

/// Control channels are identified by the device pair they serve.
pub type ControlChannelId = PairKey;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum McapError {
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("link {0:?} is not authenticated")]
    NotAuthenticated(LinkId),
    #[error("link {0:?} is down")]
    LinkDown(LinkId),
    #[error("no control channel between these devices")]
    NoControlChannel,
    #[error("unknown data channel {0}")]
    UnknownMdl(MdlId),
    #[error("payload of {len} bytes exceeds the channel limit of {max}")]
    PayloadTooLarge { len: usize, max: u32 },
    #[error("data channel {0} is closed")]
    ChannelClosed(MdlId),
    #[error("operation timed out")]
    Timeout,
    #[error("channel configuration rejected: {0}")]
    InvalidConfig(&'static str),
    #[error("peer rejected data channel {0}")]
    Rejected(MdlId),
    #[error("all data channel identifiers are used up")]
    MdlSpaceExhausted,
}

impl McapError {
    pub fn kind(&self) -> &'static str {
        match self {
            McapError::Link(e) => e.kind(),
            McapError::NotAuthenticated(_) => "NotAuthenticated",
            McapError::LinkDown(_) => "LinkDown",
            McapError::NoControlChannel => "NoControlChannel",
            McapError::UnknownMdl(_) => "UnknownMdl",
            McapError::PayloadTooLarge { .. } => "PayloadTooLarge",
            McapError::ChannelClosed(_) => "ChannelClosed",
            McapError::Timeout => "Timeout",
            McapError::InvalidConfig(_) => "InvalidConfig",
            McapError::Rejected(_) => "Rejected",
            McapError::MdlSpaceExhausted => "MdlSpaceExhausted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    Reliable,
    Streaming,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ChannelConfig {
    pub mode: ChannelMode,
    pub max_payload_bytes: u32,
}

impl ChannelConfig {
    pub fn reliable(max_payload_bytes: u32) -> Self {
        Self {
            mode: ChannelMode::Reliable,
            max_payload_bytes,
        }
    }

    pub fn streaming(max_payload_bytes: u32) -> Self {
        Self {
            mode: ChannelMode::Streaming,
            max_payload_bytes,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DataChannelState {
    Open,
    /// The link is lost; the channel waits for a reconnect.
    Suspended,
    /// Aborted locally; the registration survives.
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CloseMode {
    Delete,
    Abort,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Delivered,
    Dropped,
    PendingUntilReconnect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ClockSyncResult {
    /// Peer clock minus local clock.
    pub offset_us: i64,
    pub accuracy_us: u64,
}

/// One direction of a data channel, keyed by its sender.
#[derive(Debug, Clone, Default)]
struct Direction {
    tx_next: u32,
    unacked: BTreeMap<u32, Vec<u8>>,
    rx_next: u32,
    reorder: BTreeMap<u32, Vec<u8>>,
    delivered: Vec<Vec<u8>>,
}

#[derive(Debug, Clone)]
pub struct DataChannel {
    mdl_id: MdlId,
    config: ChannelConfig,
    state: DataChannelState,
    epoch: u32,
    dirs: BTreeMap<DeviceAddress, Direction>,
    transmissions: u64,
    retransmissions: u64,
}

impl DataChannel {
    fn new(mdl_id: MdlId, config: ChannelConfig, pair: PairKey) -> Self {
        let (a, b) = pair.devices();
        Self {
            mdl_id,
            config,
            state: DataChannelState::Open,
            epoch: 0,
            dirs: BTreeMap::from([(a, Direction::default()), (b, Direction::default())]),
            transmissions: 0,
            retransmissions: 0,
        }
    }

    pub fn mdl_id(&self) -> MdlId {
        self.mdl_id
    }

    pub fn config(&self) -> ChannelConfig {
        self.config
    }

    pub fn state(&self) -> DataChannelState {
        self.state
    }

    /// Next sequence number `sender` will use.
    pub fn tx_seq(&self, sender: DeviceAddress) -> u32 {
        self.dirs.get(&sender).map_or(0, |d| d.tx_next)
    }

    /// Next sequence number expected from `sender`.
    pub fn rx_seq(&self, sender: DeviceAddress) -> u32 {
        self.dirs.get(&sender).map_or(0, |d| d.rx_next)
    }

    /// Payloads from `sender` handed to the receiving side, in order.
    pub fn delivered_from(&self, sender: DeviceAddress) -> &[Vec<u8>] {
        self.dirs.get(&sender).map_or(&[], |d| &d.delivered)
    }

    /// Unacknowledged payloads from `sender`, by sequence number.
    pub fn unacked_from(&self, sender: DeviceAddress) -> impl Iterator<Item = (u32, &[u8])> {
        self.dirs
            .get(&sender)
            .into_iter()
            .flat_map(|d| d.unacked.iter().map(|(s, p)| (*s, p.as_slice())))
    }

    pub fn transmissions(&self) -> u64 {
        self.transmissions
    }

    pub fn retransmissions(&self) -> u64 {
        self.retransmissions
    }
}

#[derive(Debug, Clone)]
pub struct ControlChannel {
    pair: PairKey,
    link: LinkId,
    initiator: DeviceAddress,
    next_mdl_id: u32,
    known_mdls: BTreeMap<MdlId, ChannelConfig>,
    channels: BTreeMap<MdlId, DataChannel>,
    clock_sync: Option<ClockSyncResult>,
}

impl ControlChannel {
    pub fn id(&self) -> ControlChannelId {
        self.pair
    }

    pub fn link(&self) -> LinkId {
        self.link
    }

    /// The device that opened the channel and drives its handshakes.
    pub fn initiator(&self) -> DeviceAddress {
        self.initiator
    }

    pub fn known_mdls(&self) -> &BTreeMap<MdlId, ChannelConfig> {
        &self.known_mdls
    }

    pub fn data_channel(&self, mdl: MdlId) -> Option<&DataChannel> {
        self.channels.get(&mdl)
    }

    pub fn data_channels(&self) -> impl Iterator<Item = &DataChannel> {
        self.channels.values()
    }

    /// Result of the most recent clock synchronization.
    pub fn clock_sync(&self) -> Option<ClockSyncResult> {
        self.clock_sync
    }
}

#[derive(Debug, Clone)]
struct SyncAttempt {
    link: LinkId,
    local: DeviceAddress,
    result: Option<Result<ClockSyncResult, McapError>>,
}

#[derive(Debug, Default)]
pub(crate) struct McapState {
    ctrls: BTreeMap<PairKey, ControlChannel>,
    pending: BTreeMap<(PairKey, MdlId), Option<Result<(), McapError>>>,
    pending_config: BTreeMap<(PairKey, MdlId), ChannelConfig>,
    syncs: BTreeMap<u32, SyncAttempt>,
    next_sync: u32,
}

impl Simulation {
    pub fn control_channel(&self, id: ControlChannelId) -> Option<&ControlChannel> {
        self.mcap.ctrls.get(&id)
    }

    pub fn control_channels(&self) -> impl Iterator<Item = &ControlChannel> {
        self.mcap.ctrls.values()
    }

    pub fn data_channel(&self, ctrl: ControlChannelId, mdl: MdlId) -> Option<&DataChannel> {
        self.mcap
            .ctrls
            .get(&ctrl)
            .and_then(|c| c.channels.get(&mdl))
    }

    /// Opens the control channel for the link's device pair, or returns the
    /// existing one. The link must be connected and authenticated.
    pub fn open_control_channel(&mut self, id: LinkId) -> Result<ControlChannelId, McapError> {
        let link = self.links.get(id).ok_or(LinkError::UnknownLink(id))?;
        if link.state() != LinkState::Connected {
            return Err(McapError::LinkDown(id));
        }
        if !link.is_authenticated() {
            return Err(McapError::NotAuthenticated(id));
        }
        let pair = link.pair();
        let master = link.master();
        if let Some(ctrl) = self.mcap.ctrls.get_mut(&pair) {
            ctrl.link = id;
            return Ok(pair);
        }
        self.mcap.ctrls.insert(
            pair,
            ControlChannel {
                pair,
                link: id,
                initiator: master,
                next_mdl_id: 1,
                known_mdls: BTreeMap::new(),
                channels: BTreeMap::new(),
                clock_sync: None,
            },
        );
        self.trace_event(
            "mcap_open",
            master,
            json!({ "link": id.0, "peer": pair.other(master) }),
        );
        Ok(pair)
    }

    fn ctrl(&self, id: ControlChannelId) -> Result<&ControlChannel, McapError> {
        self.mcap.ctrls.get(&id).ok_or(McapError::NoControlChannel)
    }

    fn ctrl_link_up(&self, id: ControlChannelId) -> Result<LinkId, McapError> {
        let link = self.ctrl(id)?.link;
        match self.links.get(link) {
            Some(l) if l.state() == LinkState::Connected => Ok(link),
            _ => Err(McapError::LinkDown(link)),
        }
    }

    fn send_mcap_msg(&mut self, link: LinkId, from: DeviceAddress, body: ControlPdu) {
        if let Some((op, msg)) = body.mcap_name() {
            let mdl = match &body {
                ControlPdu::McapCreateRequest { mdl, .. }
                | ControlPdu::McapCreateResponse { mdl, .. }
                | ControlPdu::McapConfig { mdl, .. }
                | ControlPdu::McapConfigConfirm { mdl }
                | ControlPdu::McapReconnectRequest { mdl }
                | ControlPdu::McapReconnectResponse { mdl, .. } => *mdl,
                _ => 0,
            };
            self.trace_event(
                "mcap_msg",
                from,
                json!({ "op": op, "msg": msg, "mdl": mdl, "link": link.0 }),
            );
        }
        self.send_ctrl(link, from, body);
    }

    /// Starts the create handshake and returns the new identifier without
    /// waiting for it to finish.
    pub(crate) fn begin_create(
        &mut self,
        ctrl: ControlChannelId,
        config: ChannelConfig,
    ) -> Result<MdlId, McapError> {
        self.ctrl(ctrl)?;
        if config.max_payload_bytes == 0 {
            return Err(McapError::InvalidConfig(
                "max_payload_bytes must be positive",
            ));
        }
        if config.max_payload_bytes as usize > self.config.max_payload_bytes {
            return Err(McapError::InvalidConfig(
                "max_payload_bytes above the link limit",
            ));
        }
        let link = self.ctrl_link_up(ctrl)?;
        let c = self.mcap.ctrls.get_mut(&ctrl).expect("checked");
        let mdl = MdlId::try_from(c.next_mdl_id).map_err(|_| McapError::MdlSpaceExhausted)?;
        c.next_mdl_id += 1;
        let initiator = c.initiator;
        self.mcap.pending.insert((ctrl, mdl), None);
        self.mcap.pending_config.insert((ctrl, mdl), config);
        self.send_mcap_msg(
            link,
            initiator,
            ControlPdu::McapCreateRequest { mdl, config },
        );
        Ok(mdl)
    }

    fn await_pending(&mut self, ctrl: ControlChannelId, mdl: MdlId) -> Result<(), McapError> {
        let deadline = self.now() + self.config.control_timeout_us;
        self.drive_until(deadline, |sim| {
            sim.mcap
                .pending
                .get(&(ctrl, mdl))
                .is_none_or(Option::is_some)
        });
        match self.mcap.pending.remove(&(ctrl, mdl)) {
            Some(Some(result)) => result,
            Some(None) => Err(McapError::Timeout),
            None => Ok(()),
        }
    }

    /// Creates a data channel with the request/accept/config/confirm
    /// handshake. Identifiers count up from 1 and are never reused.
    pub fn create_data_channel(
        &mut self,
        ctrl: ControlChannelId,
        config: ChannelConfig,
    ) -> Result<MdlId, McapError> {
        let mdl = self.begin_create(ctrl, config)?;
        self.await_pending(ctrl, mdl)?;
        Ok(mdl)
    }

    /// Starts a reconnect. Returns false when the channel is already open
    /// and no handshake is needed.
    pub(crate) fn begin_reconnect(
        &mut self,
        ctrl: ControlChannelId,
        mdl: MdlId,
    ) -> Result<bool, McapError> {
        let c = self.ctrl(ctrl)?;
        if !c.known_mdls.contains_key(&mdl) {
            return Err(McapError::UnknownMdl(mdl));
        }
        let open = c
            .channels
            .get(&mdl)
            .is_some_and(|d| d.state == DataChannelState::Open);
        let initiator = c.initiator;
        let link = self.ctrl_link_up(ctrl)?;
        if open {
            return Ok(false);
        }
        if matches!(self.mcap.pending.get(&(ctrl, mdl)), Some(None)) {
            return Ok(true);
        }
        self.mcap.pending.insert((ctrl, mdl), None);
        self.send_mcap_msg(link, initiator, ControlPdu::McapReconnectRequest { mdl });
        Ok(true)
    }

    /// Brings a known data channel back with its original identifier and
    /// configuration using a two-message handshake.
    pub fn reconnect_data_channel(
        &mut self,
        ctrl: ControlChannelId,
        mdl: MdlId,
    ) -> Result<MdlId, McapError> {
        if self.begin_reconnect(ctrl, mdl)? {
            self.await_pending(ctrl, mdl)?;
        }
        Ok(mdl)
    }

    pub fn close_channel(
        &mut self,
        ctrl: ControlChannelId,
        mdl: MdlId,
        mode: CloseMode,
    ) -> Result<(), McapError> {
        let c = self
            .mcap
            .ctrls
            .get_mut(&ctrl)
            .ok_or(McapError::NoControlChannel)?;
        if !c.known_mdls.contains_key(&mdl) {
            return Err(McapError::UnknownMdl(mdl));
        }
        let initiator = c.initiator;
        match mode {
            CloseMode::Delete => {
                c.known_mdls.remove(&mdl);
                c.channels.remove(&mdl);
                self.trace_event("mdl_delete", initiator, json!({ "mdl": mdl }));
            }
            CloseMode::Abort => {
                if let Some(d) = c.channels.get_mut(&mdl) {
                    d.state = DataChannelState::Closed;
                    d.epoch += 1;
                }
                self.trace_event("mdl_abort", initiator, json!({ "mdl": mdl }));
            }
        }
        Ok(())
    }

    pub(crate) fn on_mcap_ctrl(
        &mut self,
        link: LinkId,
        _from: DeviceAddress,
        to: DeviceAddress,
        body: ControlPdu,
    ) {
        let Some(pair) = self.links.get(link).map(|l| l.pair()) else {
            return;
        };
        if !self.mcap.ctrls.contains_key(&pair) {
            return;
        }
        match body {
            ControlPdu::McapCreateRequest { mdl, config } => {
                let accepted = config.max_payload_bytes > 0;
                self.send_mcap_msg(link, to, ControlPdu::McapCreateResponse { mdl, accepted });
            }
            ControlPdu::McapCreateResponse { mdl, accepted } => {
                let Some(config) = self.mcap.pending_config.get(&(pair, mdl)).copied() else {
                    return;
                };
                if accepted {
                    self.send_mcap_msg(link, to, ControlPdu::McapConfig { mdl, config });
                } else {
                    self.mcap.pending_config.remove(&(pair, mdl));
                    self.resolve_pending(pair, mdl, Err(McapError::Rejected(mdl)));
                }
            }
            ControlPdu::McapConfig { mdl, .. } => {
                self.send_mcap_msg(link, to, ControlPdu::McapConfigConfirm { mdl });
            }
            ControlPdu::McapConfigConfirm { mdl } => {
                let Some(config) = self.mcap.pending_config.remove(&(pair, mdl)) else {
                    return;
                };
                let c = self.mcap.ctrls.get_mut(&pair).expect("checked");
                c.known_mdls.insert(mdl, config);
                c.channels.insert(mdl, DataChannel::new(mdl, config, pair));
                self.trace_event(
                    "mdl_create",
                    to,
                    json!({ "mdl": mdl, "mode": config.mode, "max_payload_bytes": config.max_payload_bytes }),
                );
                self.resolve_pending(pair, mdl, Ok(()));
            }
            ControlPdu::McapReconnectRequest { mdl } => {
                let accepted = self.mcap.ctrls[&pair].known_mdls.contains_key(&mdl);
                self.send_mcap_msg(
                    link,
                    to,
                    ControlPdu::McapReconnectResponse { mdl, accepted },
                );
            }
            ControlPdu::McapReconnectResponse { mdl, accepted } => {
                if accepted {
                    self.complete_reconnect(pair, mdl);
                } else {
                    self.resolve_pending(pair, mdl, Err(McapError::UnknownMdl(mdl)));
                }
            }
            _ => {}
        }
    }

    fn resolve_pending(&mut self, pair: PairKey, mdl: MdlId, result: Result<(), McapError>) {
        if let Some(slot) = self.mcap.pending.get_mut(&(pair, mdl)) {
            if slot.is_none() {
                *slot = Some(result);
            }
        }
    }

    fn complete_reconnect(&mut self, pair: PairKey, mdl: MdlId) {
        let Some(c) = self.mcap.ctrls.get_mut(&pair) else {
            return;
        };
        let Some(&config) = c.known_mdls.get(&mdl) else {
            return;
        };
        let initiator = c.initiator;
        let d = c
            .channels
            .entry(mdl)
            .or_insert_with(|| DataChannel::new(mdl, config, pair));
        if d.state != DataChannelState::Open {
            d.state = DataChannelState::Open;
            d.epoch += 1;
        }
        let flush: Vec<(DeviceAddress, u32)> = d
            .dirs
            .iter()
            .flat_map(|(sender, dir)| dir.unacked.keys().map(move |s| (*sender, *s)))
            .collect();
        self.trace_event(
            "mdl_reconnect",
            initiator,
            json!({
                "mdl": mdl,
                "mode": config.mode,
                "max_payload_bytes": config.max_payload_bytes,
                "flushed": flush.len(),
            }),
        );
        for (sender, seq) in flush {
            self.transmit_reliable(pair, mdl, sender, seq, false);
        }
        self.resolve_pending(pair, mdl, Ok(()));
        self.on_mdl_reconnected(pair, mdl);
    }

    pub(crate) fn on_link_lost_mcap(&mut self, link: LinkId) {
        let Some(pair) = self.links.get(link).map(|l| l.pair()) else {
            return;
        };
        let Some(c) = self.mcap.ctrls.get_mut(&pair) else {
            return;
        };
        let initiator = c.initiator;
        let mut suspended = Vec::new();
        for d in c.channels.values_mut() {
            if d.state == DataChannelState::Open {
                d.state = DataChannelState::Suspended;
                d.epoch += 1;
                suspended.push(d.mdl_id);
            }
        }
        for mdl in suspended {
            self.trace_event("mdl_suspend", initiator, json!({ "mdl": mdl }));
        }
        let waiting: Vec<MdlId> = self
            .mcap
            .pending
            .iter()
            .filter(|((p, _), v)| *p == pair && v.is_none())
            .map(|((_, m), _)| *m)
            .collect();
        for mdl in waiting {
            self.mcap.pending_config.remove(&(pair, mdl));
            self.resolve_pending(pair, mdl, Err(McapError::LinkDown(link)));
        }
    }

    pub(crate) fn on_link_restored_mcap(&mut self, link: LinkId) {
        self.on_link_restored_hdp(link);
    }

    fn transmit_data(
        &mut self,
        pair: PairKey,
        mdl: MdlId,
        from: DeviceAddress,
        seq: u32,
        plain: &[u8],
    ) -> usize {
        let Some(c) = self.mcap.ctrls.get(&pair) else {
            return 0;
        };
        let link = c.link;
        let Some(key) = self.link_key(link, from) else {
            return 0;
        };
        let now = self.now();
        let data = apply_cipher(&key, now, plain);
        let freq = self.link_tx_freq(link, from);
        let to = pair.other(from);
        let bytes = plain.len();
        let n = self.send_pdu(
            from,
            to,
            freq,
            LinkPdu::MdlData {
                link,
                mdl,
                seq,
                clock_us: now.as_micros(),
                data,
            },
        );
        if let Some(d) = self
            .mcap
            .ctrls
            .get_mut(&pair)
            .and_then(|c| c.channels.get_mut(&mdl))
        {
            d.transmissions += 1;
        }
        self.trace_event(
            "mdl_send",
            from,
            json!({ "mdl": mdl, "seq": seq, "bytes": bytes }),
        );
        n
    }

    fn transmit_reliable(
        &mut self,
        pair: PairKey,
        mdl: MdlId,
        from: DeviceAddress,
        seq: u32,
        retransmission: bool,
    ) {
        let Some(c) = self.mcap.ctrls.get_mut(&pair) else {
            return;
        };
        let link = c.link;
        let Some(d) = c.channels.get_mut(&mdl) else {
            return;
        };
        if d.state != DataChannelState::Open {
            return;
        }
        let Some(payload) = d
            .dirs
            .get(&from)
            .and_then(|dir| dir.unacked.get(&seq))
            .cloned()
        else {
            return;
        };
        if retransmission {
            d.retransmissions += 1;
        }
        let epoch = d.epoch;
        self.transmit_data(pair, mdl, from, seq, &payload);
        self.engine.schedule_in(
            self.config.retransmit_interval_us,
            Event::MdlRetx {
                link,
                mdl,
                from,
                seq,
                epoch,
            },
        );
    }

    /// Queues a payload without waiting for its fate. Reliable payloads get
    /// a sequence number even while suspended; streaming payloads sent while
    /// suspended are dropped.
    pub(crate) fn mdl_send_nowait(
        &mut self,
        ctrl: ControlChannelId,
        mdl: MdlId,
        from: DeviceAddress,
        payload: &[u8],
    ) -> Result<(Option<u32>, SendOutcome), McapError> {
        let c = self
            .mcap
            .ctrls
            .get_mut(&ctrl)
            .ok_or(McapError::NoControlChannel)?;
        let d = c.channels.get_mut(&mdl).ok_or(McapError::UnknownMdl(mdl))?;
        if d.state == DataChannelState::Closed {
            return Err(McapError::ChannelClosed(mdl));
        }
        if payload.len() > d.config.max_payload_bytes as usize {
            return Err(McapError::PayloadTooLarge {
                len: payload.len(),
                max: d.config.max_payload_bytes,
            });
        }
        let state = d.state;
        let dir = d.dirs.entry(from).or_default();
        match d.config.mode {
            ChannelMode::Reliable => {
                let seq = dir.tx_next;
                dir.tx_next += 1;
                dir.unacked.insert(seq, payload.to_vec());
                if state == DataChannelState::Open {
                    self.transmit_reliable(ctrl, mdl, from, seq, false);
                    // Delivered is decided by the caller once the ack lands.
                    Ok((Some(seq), SendOutcome::Delivered))
                } else {
                    Ok((Some(seq), SendOutcome::PendingUntilReconnect))
                }
            }
            ChannelMode::Streaming => {
                if state != DataChannelState::Open {
                    self.trace_event(
                        "mdl_drop",
                        from,
                        json!({ "mdl": mdl, "reason": "suspended" }),
                    );
                    return Ok((None, SendOutcome::Dropped));
                }
                let seq = dir.tx_next;
                dir.tx_next += 1;
                if self.transmit_data(ctrl, mdl, from, seq, payload) == 0 {
                    self.trace_event(
                        "mdl_drop",
                        from,
                        json!({ "mdl": mdl, "seq": seq, "reason": "lost" }),
                    );
                    Ok((Some(seq), SendOutcome::Dropped))
                } else {
                    Ok((Some(seq), SendOutcome::Delivered))
                }
            }
        }
    }

    /// Sends one payload from `from` and waits for its outcome. Reliable
    /// payloads are retransmitted until acknowledged; if the link is lost
    /// first they stay queued and are flushed after reconnection.
    pub fn send(
        &mut self,
        ctrl: ControlChannelId,
        mdl: MdlId,
        from: DeviceAddress,
        payload: &[u8],
    ) -> Result<SendOutcome, McapError> {
        let (seq, outcome) = self.mdl_send_nowait(ctrl, mdl, from, payload)?;
        let mode = self.data_channel(ctrl, mdl).map(|d| d.config.mode);
        match (mode, seq, outcome) {
            (Some(ChannelMode::Reliable), Some(seq), SendOutcome::Delivered) => {
                let deadline = self.now() + self.config.control_timeout_us;
                let pending = |sim: &Simulation| {
                    sim.data_channel(ctrl, mdl).is_some_and(|d| {
                        d.state == DataChannelState::Open
                            && d.dirs
                                .get(&from)
                                .is_some_and(|dir| dir.unacked.contains_key(&seq))
                    })
                };
                self.drive_until(deadline, |sim| !pending(sim));
                let d = self
                    .data_channel(ctrl, mdl)
                    .ok_or(McapError::UnknownMdl(mdl))?;
                if !d
                    .dirs
                    .get(&from)
                    .is_some_and(|dir| dir.unacked.contains_key(&seq))
                {
                    Ok(SendOutcome::Delivered)
                } else if d.state == DataChannelState::Suspended {
                    Ok(SendOutcome::PendingUntilReconnect)
                } else {
                    Err(McapError::Timeout)
                }
            }
            (Some(ChannelMode::Streaming), _, SendOutcome::Delivered) => {
                let t = self.now() + PROPAGATION_DELAY_US;
                self.run_until(t);
                Ok(SendOutcome::Delivered)
            }
            (_, _, outcome) => Ok(outcome),
        }
    }

    pub(crate) fn on_mdl_retx(
        &mut self,
        link: LinkId,
        mdl: MdlId,
        from: DeviceAddress,
        seq: u32,
        epoch: u32,
    ) {
        let Some(pair) = self.links.get(link).map(|l| l.pair()) else {
            return;
        };
        let current = self
            .data_channel(pair, mdl)
            .is_some_and(|d| d.epoch == epoch && d.state == DataChannelState::Open);
        if current {
            self.transmit_reliable(pair, mdl, from, seq, true);
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn on_mdl_data(
        &mut self,
        link: LinkId,
        mdl: MdlId,
        from: DeviceAddress,
        to: DeviceAddress,
        seq: u32,
        clock_us: u64,
        data: Vec<u8>,
    ) {
        let Some(pair) = self.links.get(link).map(|l| l.pair()) else {
            return;
        };
        let Some(key) = self.link_key(link, to) else {
            return;
        };
        let plain = apply_cipher(&key, SimTime::from_micros(clock_us), &data);
        let Some(d) = self
            .mcap
            .ctrls
            .get_mut(&pair)
            .and_then(|c| c.channels.get_mut(&mdl))
        else {
            return;
        };
        if d.state == DataChannelState::Closed {
            return;
        }
        let mode = d.config.mode;
        let dir = d.dirs.entry(from).or_default();
        let mut ready = Vec::new();
        let mut stale = false;
        match mode {
            ChannelMode::Reliable => {
                if seq == dir.rx_next {
                    ready.push((seq, plain));
                    dir.rx_next += 1;
                    while let Some(next) = dir.reorder.remove(&dir.rx_next) {
                        ready.push((dir.rx_next, next));
                        dir.rx_next += 1;
                    }
                } else if seq > dir.rx_next {
                    dir.reorder.insert(seq, plain);
                }
            }
            ChannelMode::Streaming => {
                if seq >= dir.rx_next {
                    dir.rx_next = seq + 1;
                    ready.push((seq, plain));
                } else {
                    stale = true;
                }
            }
        }
        for (_, p) in &ready {
            dir.delivered.push(p.clone());
        }
        if mode == ChannelMode::Reliable {
            let freq = self.link_tx_freq(link, to);
            self.send_pdu(to, from, freq, LinkPdu::MdlAck { link, mdl, seq });
        }
        if stale {
            self.trace_event(
                "mdl_drop",
                to,
                json!({ "mdl": mdl, "seq": seq, "reason": "stale" }),
            );
        }
        for (seq, payload) in ready {
            self.trace_event("mdl_deliver", to, json!({ "mdl": mdl, "seq": seq }));
            self.on_mdl_payload(pair, mdl, from, to, &payload);
        }
    }

    pub(crate) fn on_mdl_ack(&mut self, link: LinkId, mdl: MdlId, sender: DeviceAddress, seq: u32) {
        let Some(pair) = self.links.get(link).map(|l| l.pair()) else {
            return;
        };
        let removed = self
            .mcap
            .ctrls
            .get_mut(&pair)
            .and_then(|c| c.channels.get_mut(&mdl))
            .and_then(|d| d.dirs.get_mut(&sender))
            .and_then(|dir| dir.unacked.remove(&seq));
        if let Some(payload) = removed {
            self.trace_event("mdl_ack", sender, json!({ "mdl": mdl, "seq": seq }));
            self.on_mdl_acked(pair, mdl, sender, &payload);
        }
    }

    /// The local clock of `dev` as it would stamp a sync message.
    fn sync_stamp(&mut self, dev: DeviceAddress) -> i64 {
        let (offset, jitter) = self.devices.get(&dev).map_or((0, 0), |d| {
            (d.config.clock_offset_us, d.config.clock_jitter_us)
        });
        self.now().as_micros() as i64 + offset + self.random_jitter(jitter)
    }

    /// Two-way time transfer initiated by the control channel's initiator.
    pub fn sync_clocks(&mut self, ctrl: ControlChannelId) -> Result<ClockSyncResult, McapError> {
        let local = self.ctrl(ctrl)?.initiator;
        self.sync_clocks_from(ctrl, local)
    }

    /// Two-way time transfer from `local`; the offset is the peer's clock
    /// minus `local`'s.
    pub fn sync_clocks_from(
        &mut self,
        ctrl: ControlChannelId,
        local: DeviceAddress,
    ) -> Result<ClockSyncResult, McapError> {
        let link = self.ctrl_link_up(ctrl)?;
        let attempt = self.mcap.next_sync;
        self.mcap.next_sync += 1;
        self.mcap.syncs.insert(
            attempt,
            SyncAttempt {
                link,
                local,
                result: None,
            },
        );
        let t0 = self.sync_stamp(local);
        let freq = self.link_tx_freq(link, local);
        self.send_pdu(
            local,
            ctrl.other(local),
            freq,
            LinkPdu::SyncRequest { link, attempt, t0 },
        );
        self.engine.schedule_in(
            self.config.sync_timeout_us,
            Event::SyncTimeout { link, attempt },
        );
        let deadline = self.now() + self.config.sync_timeout_us;
        self.drive_until(deadline, |sim| sim.mcap.syncs[&attempt].result.is_some());
        let result = self
            .mcap
            .syncs
            .remove(&attempt)
            .and_then(|a| a.result)
            .unwrap_or(Err(McapError::Timeout))?;
        if let Some(c) = self.mcap.ctrls.get_mut(&ctrl) {
            c.clock_sync = Some(result);
        }
        self.trace_event(
            "clock_sync",
            local,
            json!({ "peer": ctrl.other(local), "offset_us": result.offset_us, "accuracy_us": result.accuracy_us }),
        );
        Ok(result)
    }

    pub(crate) fn on_sync_request(
        &mut self,
        link: LinkId,
        from: DeviceAddress,
        to: DeviceAddress,
        attempt: u32,
        t0: i64,
    ) {
        let t1 = self.sync_stamp(to);
        let freq = self.link_tx_freq(link, to);
        self.send_pdu(
            to,
            from,
            freq,
            LinkPdu::SyncReply {
                link,
                attempt,
                t0,
                t1,
            },
        );
    }

    pub(crate) fn on_sync_reply(
        &mut self,
        link: LinkId,
        to: DeviceAddress,
        attempt: u32,
        t0: i64,
        t1: i64,
    ) {
        let waiting = self
            .mcap
            .syncs
            .get(&attempt)
            .is_some_and(|a| a.link == link && a.local == to && a.result.is_none());
        if !waiting {
            return;
        }
        let t2 = self.sync_stamp(to);
        let result = two_way_offset(t0, t1, t2);
        self.mcap.syncs.get_mut(&attempt).expect("checked").result = Some(Ok(result));
    }

    pub(crate) fn on_sync_timeout(&mut self, _link: LinkId, attempt: u32) {
        if let Some(a) = self.mcap.syncs.get_mut(&attempt) {
            if a.result.is_none() {
                a.result = Some(Err(McapError::Timeout));
            }
        }
    }
}

/// Offset and accuracy from one request/reply exchange: `t0` and `t2` are
/// the local send and receive stamps, `t1` the peer's stamp. The midpoint
/// is rounded down and the accuracy (half the round trip) rounded up.
pub fn two_way_offset(t0: i64, t1: i64, t2: i64) -> ClockSyncResult {
    let rtt = t2 - t0;
    ClockSyncResult {
        offset_us: t1 - (t0 + t2).div_euclid(2),
        accuracy_us: (rtt.max(0) as u64).div_ceil(2),
    }
}
