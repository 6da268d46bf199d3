//! Paging, piconet membership, link supervision and the reliable control
//! transport that higher layers use for their handshakes.

use std::collections::{BTreeMap, BTreeSet};

use rand::RngCore;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::address::DeviceAddress;
use crate::config::SimConfig;
use crate::discovery::ConnectabilityMode;
use crate::pdu::{ControlPdu, LinkPdu};
use crate::security::AuthState;
use crate::sim::{Event, PairKey, SimError, Simulation};
use crate::time::SimTime;

/// Active slaves a single master may serve.
pub const MAX_ACTIVE_SLAVES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct LinkId(pub u32);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinkError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("{target} has not been discovered by {initiator}")]
    NotDiscovered {
        initiator: DeviceAddress,
        target: DeviceAddress,
    },
    #[error("a device cannot page itself")]
    SelfPage,
    #[error("piconet of {0} already has 7 active slaves")]
    PiconetFull(DeviceAddress),
    #[error("{0} is not connectable")]
    NotConnectable(DeviceAddress),
    #[error("{0} did not answer the page")]
    Unreachable(DeviceAddress),
    #[error("{0:?} already links these devices")]
    AlreadyConnected(LinkId),
    #[error("unknown link {0:?}")]
    UnknownLink(LinkId),
    #[error("link {0:?} is not connected")]
    LinkDown(LinkId),
    #[error("role switch would break the piconet topology rules")]
    WouldViolateTopology,
    #[error("{slave} is not a slave of {master}")]
    NotInPiconet {
        master: DeviceAddress,
        slave: DeviceAddress,
    },
}

impl LinkError {
    /// Short machine-readable name, as used in trace error events.
    pub fn kind(&self) -> &'static str {
        match self {
            LinkError::Sim(SimError::UnknownDevice(_)) => "UnknownDevice",
            LinkError::Sim(_) => "Sim",
            LinkError::NotDiscovered { .. } => "NotDiscovered",
            LinkError::SelfPage => "SelfPage",
            LinkError::PiconetFull(_) => "PiconetFull",
            LinkError::NotConnectable(_) => "NotConnectable",
            LinkError::Unreachable(_) => "Unreachable",
            LinkError::AlreadyConnected(_) => "AlreadyConnected",
            LinkError::UnknownLink(_) => "UnknownLink",
            LinkError::LinkDown(_) => "LinkDown",
            LinkError::WouldViolateTopology => "WouldViolateTopology",
            LinkError::NotInPiconet { .. } => "NotInPiconet",
        }
    }
}

/// Parameters agreed right after a link forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConnectionParams {
    pub hop_seed: u64,
    pub freq_low: u8,
    pub freq_high: u8,
    pub hop_interval_us: u64,
    pub page_size_bytes: u32,
}

impl ConnectionParams {
    /// Frequency in use during the hop slot containing `now`.
    pub fn hop_frequency(&self, now: SimTime) -> u8 {
        let slot = now.as_micros() / self.hop_interval_us;
        let span = u64::from(self.freq_high - self.freq_low) + 1;
        self.freq_low
            + (splitmix64(self.hop_seed ^ slot.wrapping_mul(0x9E37_79B9_7F4A_7C15)) % span) as u8
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives connection parameters for a new link. The hop seed mixes one draw
/// from the master's generator with both addresses; everything else comes
/// from the (possibly overridden) configuration.
pub fn negotiate_params<R: RngCore + ?Sized>(
    master: DeviceAddress,
    slave: DeviceAddress,
    rng: &mut R,
    config: &SimConfig,
) -> ConnectionParams {
    let draw = rng.next_u64();
    let hop_seed = splitmix64(draw ^ master.value().rotate_left(16) ^ slave.value());
    ConnectionParams {
        hop_seed,
        freq_low: config.freq_low,
        freq_high: config.freq_high,
        hop_interval_us: config.hop_interval_us,
        page_size_bytes: config.page_size_bytes,
    }
}

/// Scales requests down proportionally when their sum exceeds `cap`.
/// Grants are rounded down to whole bits.
pub fn admit_traffic(cap_bps: u64, requested_bps: &[u64]) -> Vec<u64> {
    let total: u128 = requested_bps.iter().map(|&r| u128::from(r)).sum();
    if total <= u128::from(cap_bps) {
        return requested_bps.to_vec();
    }
    requested_bps
        .iter()
        .map(|&r| (u128::from(r) * u128::from(cap_bps) / total) as u64)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LinkState {
    /// Paged, parameters not yet confirmed by the slave.
    Connecting,
    Connected,
    Lost,
}

#[derive(Debug, Clone)]
pub(crate) enum CtrlPurpose {
    ConnParams,
    Plain,
}

#[derive(Debug, Clone)]
pub(crate) struct Outstanding {
    from: DeviceAddress,
    to: DeviceAddress,
    body: ControlPdu,
    purpose: CtrlPurpose,
}

#[derive(Debug, Clone)]
pub struct Link {
    id: LinkId,
    master: DeviceAddress,
    slave: DeviceAddress,
    state: LinkState,
    master_params: ConnectionParams,
    slave_params: Option<ConnectionParams>,
    generation: u32,
    keepalive_sent: u64,
    keepalive_acked: u64,
    misses: u32,
    next_ctrl_id: u64,
    outstanding: BTreeMap<u64, Outstanding>,
    seen_ctrl: BTreeSet<(DeviceAddress, u64)>,
    pub(crate) auth: AuthState,
}

impl Link {
    pub fn id(&self) -> LinkId {
        self.id
    }

    pub fn master(&self) -> DeviceAddress {
        self.master
    }

    pub fn slave(&self) -> DeviceAddress {
        self.slave
    }

    pub fn state(&self) -> LinkState {
        self.state
    }

    pub fn pair(&self) -> PairKey {
        PairKey::new(self.master, self.slave)
    }

    pub fn peer_of(&self, dev: DeviceAddress) -> DeviceAddress {
        if dev == self.master {
            self.slave
        } else {
            self.master
        }
    }

    /// The parameters as stored by one endpoint.
    pub fn params_of(&self, dev: DeviceAddress) -> Option<&ConnectionParams> {
        if dev == self.master {
            Some(&self.master_params)
        } else if dev == self.slave {
            self.slave_params.as_ref()
        } else {
            None
        }
    }

    pub fn is_authenticated(&self) -> bool {
        self.auth.authenticated
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Piconet {
    master: DeviceAddress,
    slaves: BTreeSet<DeviceAddress>,
    version_rate_cap_bps: u64,
    granted_bps: BTreeMap<DeviceAddress, u64>,
}

impl Piconet {
    fn new(master: DeviceAddress, cap: u64) -> Self {
        Self {
            master,
            slaves: BTreeSet::new(),
            version_rate_cap_bps: cap,
            granted_bps: BTreeMap::new(),
        }
    }

    pub fn master(&self) -> DeviceAddress {
        self.master
    }

    pub fn slaves(&self) -> &BTreeSet<DeviceAddress> {
        &self.slaves
    }

    pub fn rate_cap_bps(&self) -> u64 {
        self.version_rate_cap_bps
    }

    /// Last grants handed out by `admit_piconet_traffic`.
    pub fn granted_bps(&self) -> &BTreeMap<DeviceAddress, u64> {
        &self.granted_bps
    }
}

#[derive(Debug, Clone)]
struct PageProc {
    initiator: DeviceAddress,
    target: DeviceAddress,
    /// None for automatic re-pages of a lost link, which never give up.
    deadline: Option<SimTime>,
    link: Option<LinkId>,
    repage: bool,
    outcome: Option<Result<LinkId, LinkError>>,
}

#[derive(Debug, Default)]
pub(crate) struct LinkTable {
    links: BTreeMap<LinkId, Link>,
    by_pair: BTreeMap<PairKey, LinkId>,
    piconets: BTreeMap<DeviceAddress, Piconet>,
    pages: BTreeMap<u32, PageProc>,
    next_link: u32,
    next_page: u32,
}

impl LinkTable {
    pub fn piconets(&self) -> impl Iterator<Item = (&DeviceAddress, &Piconet)> {
        self.piconets.iter()
    }

    pub fn get(&self, id: LinkId) -> Option<&Link> {
        self.links.get(&id)
    }

    pub fn get_mut(&mut self, id: LinkId) -> Option<&mut Link> {
        self.links.get_mut(&id)
    }
}

impl Simulation {
    pub fn link(&self, id: LinkId) -> Option<&Link> {
        self.links.links.get(&id)
    }

    pub fn links(&self) -> impl Iterator<Item = &Link> {
        self.links.links.values()
    }

    pub fn link_between(&self, a: DeviceAddress, b: DeviceAddress) -> Option<LinkId> {
        self.links.by_pair.get(&PairKey::new(a, b)).copied()
    }

    pub fn piconet(&self, master: DeviceAddress) -> Option<&Piconet> {
        self.links.piconets.get(&master)
    }

    pub fn piconets(&self) -> impl Iterator<Item = &Piconet> {
        self.links.piconets.values()
    }

    /// Masters of every piconet `dev` is a slave in.
    pub fn masters_of(&self, dev: DeviceAddress) -> Vec<DeviceAddress> {
        self.links
            .piconets
            .values()
            .filter(|p| p.slaves.contains(&dev))
            .map(|p| p.master)
            .collect()
    }

    pub(crate) fn connected_link(&self, id: LinkId) -> Result<&Link, LinkError> {
        let link = self
            .links
            .links
            .get(&id)
            .ok_or(LinkError::UnknownLink(id))?;
        if link.state != LinkState::Connected {
            return Err(LinkError::LinkDown(id));
        }
        Ok(link)
    }

    /// Pages `target`. On success `initiator` masters a piconet containing
    /// `target` as a slave and both hold the same connection parameters.
    pub fn page(
        &mut self,
        initiator: DeviceAddress,
        target: DeviceAddress,
    ) -> Result<LinkId, LinkError> {
        let page = self.begin_page(initiator, target)?;
        let deadline = self.now() + self.config.page_timeout_us + 1;
        self.drive_until(deadline, |sim| sim.links.pages[&page].outcome.is_some());
        match self.links.pages[&page].outcome.clone() {
            Some(outcome) => outcome,
            None => unreachable!("page procedures resolve by their deadline"),
        }
    }

    fn begin_page(
        &mut self,
        initiator: DeviceAddress,
        target: DeviceAddress,
    ) -> Result<u32, LinkError> {
        if initiator == target {
            return Err(LinkError::SelfPage);
        }
        let known = self.device_state(initiator)?.known.contains(&target);
        self.device_state(target)?;
        if !known {
            return Err(LinkError::NotDiscovered { initiator, target });
        }
        if let Some(existing) = self.link_between(initiator, target) {
            return Err(LinkError::AlreadyConnected(existing));
        }
        self.check_room(initiator)?;
        let now = self.now();
        let id = self.links.next_page;
        self.links.next_page += 1;
        self.links.pages.insert(
            id,
            PageProc {
                initiator,
                target,
                deadline: Some(now + self.config.page_timeout_us),
                link: None,
                repage: false,
                outcome: None,
            },
        );
        self.record(
            now,
            "page",
            initiator,
            json!({ "target": target, "page": id }),
        );
        self.on_page_tx(id);
        Ok(id)
    }

    fn check_room(&self, master: DeviceAddress) -> Result<(), LinkError> {
        match self.links.piconets.get(&master) {
            Some(p) if p.slaves.len() >= MAX_ACTIVE_SLAVES => Err(LinkError::PiconetFull(master)),
            _ => Ok(()),
        }
    }

    fn resolve_page(&mut self, page: u32, outcome: Result<LinkId, LinkError>) {
        if let Some(proc_) = self.links.pages.get_mut(&page) {
            proc_.outcome = Some(outcome);
        }
    }

    pub(crate) fn on_page_tx(&mut self, page: u32) {
        let Some(proc_) = self.links.pages.get(&page).cloned() else {
            return;
        };
        if proc_.outcome.is_some() {
            return;
        }
        let now = self.now();
        if proc_.repage {
            let lost = proc_
                .link
                .and_then(|l| self.links.links.get(&l))
                .is_some_and(|l| l.state == LinkState::Lost);
            if !lost {
                self.resolve_page(page, Ok(proc_.link.expect("re-page has a link")));
                return;
            }
        } else if let Some(deadline) = proc_.deadline {
            if now >= deadline {
                self.fail_page(page, &proc_);
                return;
            }
        }
        if proc_.link.is_none() || proc_.repage {
            let freq = self.scan_frequency_of(proc_.target, now);
            self.send_pdu(
                proc_.initiator,
                proc_.target,
                freq,
                LinkPdu::PageRequest { page },
            );
        }
        let mut next = now + self.config.page_retry_interval_us;
        if let Some(deadline) = proc_.deadline {
            next = next.min(deadline);
        }
        self.engine
            .schedule(Event::PageTx { page }, next)
            .expect("future");
    }

    fn fail_page(&mut self, page: u32, proc_: &PageProc) {
        if let Some(link) = proc_.link {
            self.remove_link(link);
        }
        let target_connectable = self
            .devices
            .get(&proc_.target)
            .is_some_and(|d| d.connectability == ConnectabilityMode::Connectable);
        let err = if target_connectable {
            LinkError::Unreachable(proc_.target)
        } else {
            LinkError::NotConnectable(proc_.target)
        };
        self.trace_event(
            "page_timeout",
            proc_.initiator,
            json!({ "target": proc_.target, "page": page, "error": err.kind() }),
        );
        self.resolve_page(page, Err(err));
    }

    pub(crate) fn on_page_request(&mut self, from: DeviceAddress, to: DeviceAddress, page: u32) {
        let connectable = self
            .devices
            .get(&to)
            .is_some_and(|d| d.connectability == ConnectabilityMode::Connectable);
        if !connectable {
            return;
        }
        let freq = self.scan_frequency_of(to, self.now());
        self.send_pdu(to, from, freq, LinkPdu::PageAccept { page });
    }

    pub(crate) fn on_page_accept(&mut self, from: DeviceAddress, page: u32) {
        let Some(proc_) = self.links.pages.get(&page).cloned() else {
            return;
        };
        if proc_.outcome.is_some() || from != proc_.target {
            return;
        }
        if proc_.repage {
            let link = proc_.link.expect("re-page has a link");
            self.restore_link(link);
            self.resolve_page(page, Ok(link));
            return;
        }
        if proc_.link.is_some() {
            return;
        }
        if let Err(err) = self.check_room(proc_.initiator) {
            self.resolve_page(page, Err(err));
            return;
        }
        let (master, slave) = (proc_.initiator, proc_.target);
        let params = negotiate_params(master, slave, &mut self.rng, &self.config);
        let id = LinkId(self.links.next_link);
        self.links.next_link += 1;
        self.links.links.insert(
            id,
            Link {
                id,
                master,
                slave,
                state: LinkState::Connecting,
                master_params: params,
                slave_params: None,
                generation: 0,
                keepalive_sent: 0,
                keepalive_acked: 0,
                misses: 0,
                next_ctrl_id: 0,
                outstanding: BTreeMap::new(),
                seen_ctrl: BTreeSet::new(),
                auth: AuthState::default(),
            },
        );
        self.links.by_pair.insert(PairKey::new(master, slave), id);
        let cap = self.config.rate_cap_bps;
        self.links
            .piconets
            .entry(master)
            .or_insert_with(|| Piconet::new(master, cap))
            .slaves
            .insert(slave);
        self.links.pages.get_mut(&page).expect("exists").link = Some(id);
        self.check_topology();
        self.send_ctrl_with(
            id,
            master,
            ControlPdu::ConnParams(params),
            CtrlPurpose::ConnParams,
        );
    }

    fn connect_complete(&mut self, id: LinkId) {
        let Some(link) = self.links.links.get_mut(&id) else {
            return;
        };
        if link.state != LinkState::Connecting {
            return;
        }
        link.state = LinkState::Connected;
        link.generation += 1;
        let (master, slave, params, generation) =
            (link.master, link.slave, link.master_params, link.generation);
        self.record(
            self.now(),
            "connected",
            master,
            json!({
                "link": id.0,
                "master": master,
                "slave": slave,
                "params": params,
            }),
        );
        self.schedule_keepalive(id, generation);
        let page = self
            .links
            .pages
            .iter()
            .find(|(_, p)| p.link == Some(id) && !p.repage && p.outcome.is_none())
            .map(|(k, _)| *k);
        if let Some(page) = page {
            self.resolve_page(page, Ok(id));
        }
    }

    fn remove_link(&mut self, id: LinkId) {
        let Some(link) = self.links.links.remove(&id) else {
            return;
        };
        self.links.by_pair.remove(&link.pair());
        if let Some(p) = self.links.piconets.get_mut(&link.master) {
            p.slaves.remove(&link.slave);
            p.granted_bps.remove(&link.slave);
            if p.slaves.is_empty() {
                self.links.piconets.remove(&link.master);
            }
        }
    }

    fn schedule_keepalive(&mut self, link: LinkId, generation: u32) {
        self.engine.schedule_in(
            self.config.keepalive_interval_us,
            Event::Keepalive { link, generation },
        );
    }

    pub(crate) fn on_keepalive_tick(&mut self, id: LinkId, generation: u32) {
        let threshold = self.config.keepalive_miss_threshold;
        let Some(link) = self.links.links.get_mut(&id) else {
            return;
        };
        if link.generation != generation || link.state != LinkState::Connected {
            return;
        }
        if link.keepalive_acked < link.keepalive_sent {
            link.misses += 1;
        } else {
            link.misses = 0;
        }
        if link.misses >= threshold {
            self.lose_link(id, "supervision_timeout");
            return;
        }
        link.keepalive_sent += 1;
        let (master, slave, n) = (link.master, link.slave, link.keepalive_sent);
        let freq = self.link_tx_freq(id, master);
        self.send_pdu(master, slave, freq, LinkPdu::Keepalive { link: id, n });
        self.schedule_keepalive(id, generation);
    }

    pub(crate) fn on_keepalive(
        &mut self,
        id: LinkId,
        from: DeviceAddress,
        to: DeviceAddress,
        n: u64,
    ) {
        let freq = self.link_tx_freq(id, to);
        self.send_pdu(to, from, freq, LinkPdu::KeepaliveAck { link: id, n });
    }

    pub(crate) fn on_keepalive_ack(&mut self, id: LinkId, n: u64) {
        if let Some(link) = self.links.links.get_mut(&id) {
            link.keepalive_acked = link.keepalive_acked.max(n);
        }
    }

    /// Marks a connected link lost and starts re-paging it. Higher layers
    /// suspend their channels.
    pub(crate) fn lose_link(&mut self, id: LinkId, reason: &str) {
        let Some(link) = self.links.links.get_mut(&id) else {
            return;
        };
        if link.state != LinkState::Connected {
            return;
        }
        link.state = LinkState::Lost;
        link.generation += 1;
        link.outstanding.clear();
        let (master, slave) = (link.master, link.slave);
        self.record(
            self.now(),
            "link_lost",
            master,
            json!({ "link": id.0, "peer": slave, "reason": reason }),
        );
        self.on_link_lost_mcap(id);
        let page = self.links.next_page;
        self.links.next_page += 1;
        self.links.pages.insert(
            page,
            PageProc {
                initiator: master,
                target: slave,
                deadline: None,
                link: Some(id),
                repage: true,
                outcome: None,
            },
        );
        self.engine
            .schedule_in(self.config.page_retry_interval_us, Event::PageTx { page });
    }

    /// Forces a connected link into the lost state, as if supervision had
    /// timed out. The master starts re-paging at once.
    pub fn drop_link(&mut self, id: LinkId) -> Result<(), LinkError> {
        self.connected_link(id)?;
        self.lose_link(id, "dropped");
        Ok(())
    }

    fn restore_link(&mut self, id: LinkId) {
        let Some(link) = self.links.links.get_mut(&id) else {
            return;
        };
        if link.state != LinkState::Lost {
            return;
        }
        link.state = LinkState::Connected;
        link.generation += 1;
        link.misses = 0;
        link.keepalive_acked = link.keepalive_sent;
        let (master, slave, generation) = (link.master, link.slave, link.generation);
        self.record(
            self.now(),
            "link_restored",
            master,
            json!({ "link": id.0, "peer": slave }),
        );
        self.schedule_keepalive(id, generation);
        self.on_link_restored_mcap(id);
    }

    /// Swaps master and slave on one link. Only this link changes piconet;
    /// the old master's other slaves stay where they are.
    pub fn role_switch(&mut self, id: LinkId) -> Result<LinkId, LinkError> {
        let link = self.connected_link(id)?;
        let (old_master, new_master) = (link.master, link.slave);
        if let Some(p) = self.links.piconets.get(&new_master) {
            if p.slaves.len() >= MAX_ACTIVE_SLAVES {
                return Err(LinkError::WouldViolateTopology);
            }
        }
        if let Some(p) = self.links.piconets.get_mut(&old_master) {
            p.slaves.remove(&new_master);
            p.granted_bps.remove(&new_master);
            if p.slaves.is_empty() {
                self.links.piconets.remove(&old_master);
            }
        }
        let cap = self.config.rate_cap_bps;
        self.links
            .piconets
            .entry(new_master)
            .or_insert_with(|| Piconet::new(new_master, cap))
            .slaves
            .insert(old_master);
        let link = self.links.links.get_mut(&id).expect("checked");
        link.master = new_master;
        link.slave = old_master;
        let old_slave_params = link.slave_params.unwrap_or(link.master_params);
        link.slave_params = Some(link.master_params);
        link.master_params = old_slave_params;
        link.generation += 1;
        link.keepalive_acked = link.keepalive_sent;
        link.misses = 0;
        let generation = link.generation;
        self.record(
            self.now(),
            "role_switch",
            new_master,
            json!({ "link": id.0, "master": new_master, "slave": old_master }),
        );
        self.schedule_keepalive(id, generation);
        self.check_topology();
        Ok(id)
    }

    /// Grants per-slave rates inside `master`'s piconet under its cap.
    pub fn admit_piconet_traffic(
        &mut self,
        master: DeviceAddress,
        requested_bps: &BTreeMap<DeviceAddress, u64>,
    ) -> Result<BTreeMap<DeviceAddress, u64>, LinkError> {
        let piconet = self
            .links
            .piconets
            .get(&master)
            .ok_or(LinkError::NotInPiconet {
                master,
                slave: requested_bps.keys().next().copied().unwrap_or(master),
            })?;
        if let Some(&slave) = requested_bps.keys().find(|s| !piconet.slaves.contains(s)) {
            return Err(LinkError::NotInPiconet { master, slave });
        }
        let slaves: Vec<DeviceAddress> = requested_bps.keys().copied().collect();
        let requests: Vec<u64> = requested_bps.values().copied().collect();
        let grants = admit_traffic(piconet.version_rate_cap_bps, &requests);
        let granted: BTreeMap<DeviceAddress, u64> = slaves.into_iter().zip(grants).collect();
        let cap = piconet.version_rate_cap_bps;
        let piconet = self.links.piconets.get_mut(&master).expect("checked");
        piconet
            .granted_bps
            .extend(granted.iter().map(|(k, v)| (*k, *v)));
        let total: u64 = granted.values().sum();
        if total > cap {
            self.violation(
                "rate_cap",
                format!("{master} granted {total} over cap {cap}"),
            );
        }
        self.record(
            self.now(),
            "traffic_admitted",
            master,
            json!({ "cap_bps": cap, "requested": requested_bps, "granted": granted }),
        );
        Ok(granted)
    }

    /// Frequency an endpoint transmits on for this link right now.
    pub(crate) fn link_tx_freq(&self, id: LinkId, sender: DeviceAddress) -> u8 {
        let now = self.now();
        let Some(link) = self.links.links.get(&id) else {
            return 0;
        };
        match link.state {
            LinkState::Connected => link.params_of(sender).map_or(0, |p| p.hop_frequency(now)),
            _ => self.scan_frequency_of(link.slave, now),
        }
    }

    pub(crate) fn link_listening(
        &self,
        id: LinkId,
        receiver: DeviceAddress,
        freq: u8,
        now: SimTime,
    ) -> bool {
        let Some(link) = self.links.links.get(&id) else {
            return false;
        };
        if receiver != link.master && receiver != link.slave {
            return false;
        }
        match link.state {
            LinkState::Lost => false,
            LinkState::Connecting => self.scan_frequency_of(link.slave, now) == freq,
            LinkState::Connected => link
                .params_of(receiver)
                .is_some_and(|p| p.hop_frequency(now) == freq),
        }
    }

    pub(crate) fn page_channel_matches(
        &self,
        sender: DeviceAddress,
        _receiver: DeviceAddress,
        freq: u8,
        now: SimTime,
    ) -> bool {
        self.scan_frequency_of(sender, now) == freq
    }

    /// Queues a control message for reliable delivery to the peer on `id`.
    pub(crate) fn send_ctrl(
        &mut self,
        id: LinkId,
        from: DeviceAddress,
        body: ControlPdu,
    ) -> Option<u64> {
        self.send_ctrl_with(id, from, body, CtrlPurpose::Plain)
    }

    fn send_ctrl_with(
        &mut self,
        id: LinkId,
        from: DeviceAddress,
        body: ControlPdu,
        purpose: CtrlPurpose,
    ) -> Option<u64> {
        let link = self.links.links.get_mut(&id)?;
        if link.state == LinkState::Lost {
            return None;
        }
        let ctrl_id = link.next_ctrl_id;
        link.next_ctrl_id += 1;
        let to = link.peer_of(from);
        link.outstanding.insert(
            ctrl_id,
            Outstanding {
                from,
                to,
                body: body.clone(),
                purpose,
            },
        );
        self.transmit_ctrl(id, ctrl_id);
        Some(ctrl_id)
    }

    fn transmit_ctrl(&mut self, id: LinkId, ctrl_id: u64) {
        let Some(out) = self
            .links
            .links
            .get(&id)
            .and_then(|l| l.outstanding.get(&ctrl_id))
            .cloned()
        else {
            return;
        };
        let freq = self.link_tx_freq(id, out.from);
        self.send_pdu(
            out.from,
            out.to,
            freq,
            LinkPdu::Ctrl {
                link: id,
                id: ctrl_id,
                body: out.body,
            },
        );
        self.engine.schedule_in(
            self.config.retransmit_interval_us,
            Event::CtrlRetx {
                link: id,
                id: ctrl_id,
            },
        );
    }

    pub(crate) fn on_ctrl_retx(&mut self, id: LinkId, ctrl_id: u64) {
        let pending =
            self.links.links.get(&id).is_some_and(|l| {
                l.state != LinkState::Lost && l.outstanding.contains_key(&ctrl_id)
            });
        if pending {
            self.transmit_ctrl(id, ctrl_id);
        }
    }

    pub(crate) fn on_ctrl(
        &mut self,
        id: LinkId,
        from: DeviceAddress,
        to: DeviceAddress,
        ctrl_id: u64,
        body: ControlPdu,
    ) {
        let Some(link) = self.links.links.get_mut(&id) else {
            return;
        };
        let fresh = link.seen_ctrl.insert((from, ctrl_id));
        let freq = self.link_tx_freq(id, to);
        self.send_pdu(
            to,
            from,
            freq,
            LinkPdu::CtrlAck {
                link: id,
                id: ctrl_id,
            },
        );
        if !fresh {
            return;
        }
        match body {
            ControlPdu::ConnParams(params) => {
                if let Some(link) = self.links.links.get_mut(&id) {
                    if to == link.slave {
                        link.slave_params = Some(params);
                    }
                }
            }
            ControlPdu::PairRand { .. }
            | ControlPdu::AuthChallenge { .. }
            | ControlPdu::AuthResponse { .. } => self.on_security_ctrl(id, from, to, body),
            ControlPdu::McapCreateRequest { .. }
            | ControlPdu::McapCreateResponse { .. }
            | ControlPdu::McapConfig { .. }
            | ControlPdu::McapConfigConfirm { .. }
            | ControlPdu::McapReconnectRequest { .. }
            | ControlPdu::McapReconnectResponse { .. } => self.on_mcap_ctrl(id, from, to, body),
            ControlPdu::AssocRequest { .. }
            | ControlPdu::AssocResponse { .. }
            | ControlPdu::AssocConfirm { .. } => self.on_hdp_ctrl(id, from, to, body),
        }
    }

    pub(crate) fn on_ctrl_ack(&mut self, id: LinkId, ctrl_id: u64) {
        let Some(out) = self
            .links
            .links
            .get_mut(&id)
            .and_then(|l| l.outstanding.remove(&ctrl_id))
        else {
            return;
        };
        if let CtrlPurpose::ConnParams = out.purpose {
            self.connect_complete(id);
        }
    }
}
