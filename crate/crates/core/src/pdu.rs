//! Frames exchanged over paging and established links.

use serde::{Deserialize, Serialize};

use crate::address::DeviceAddress;
use crate::hdp::Specialization;
use crate::link::{ConnectionParams, LinkId};
use crate::mcap::ChannelConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) struct Envelope {
    pub to: DeviceAddress,
    pub pdu: LinkPdu,
}

impl Envelope {
    pub fn encode(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("PDU serialization is infallible")
    }

    pub fn decode(bytes: &[u8]) -> Option<Self> {
        serde_json::from_slice(bytes).ok()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) enum LinkPdu {
    PageRequest {
        page: u32,
    },
    PageAccept {
        page: u32,
    },
    Keepalive {
        link: LinkId,
        n: u64,
    },
    KeepaliveAck {
        link: LinkId,
        n: u64,
    },
    Ctrl {
        link: LinkId,
        id: u64,
        body: ControlPdu,
    },
    CtrlAck {
        link: LinkId,
        id: u64,
    },
    MdlData {
        link: LinkId,
        mdl: u16,
        seq: u32,
        clock_us: u64,
        data: Vec<u8>,
    },
    MdlAck {
        link: LinkId,
        mdl: u16,
        seq: u32,
    },
    SyncRequest {
        link: LinkId,
        attempt: u32,
        t0: i64,
    },
    SyncReply {
        link: LinkId,
        attempt: u32,
        t0: i64,
        t1: i64,
    },
}

impl LinkPdu {
    pub fn link(&self) -> Option<LinkId> {
        match self {
            LinkPdu::PageRequest { .. } | LinkPdu::PageAccept { .. } => None,
            LinkPdu::Keepalive { link, .. }
            | LinkPdu::KeepaliveAck { link, .. }
            | LinkPdu::Ctrl { link, .. }
            | LinkPdu::CtrlAck { link, .. }
            | LinkPdu::MdlData { link, .. }
            | LinkPdu::MdlAck { link, .. }
            | LinkPdu::SyncRequest { link, .. }
            | LinkPdu::SyncReply { link, .. } => Some(*link),
        }
    }
}

/// Messages carried by the reliable control transport of a link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub(crate) enum ControlPdu {
    ConnParams(ConnectionParams),
    PairRand {
        in_rand: [u8; 16],
    },
    AuthChallenge {
        challenge: [u8; 16],
    },
    AuthResponse {
        response: [u8; 16],
    },
    McapCreateRequest {
        mdl: u16,
        config: ChannelConfig,
    },
    McapCreateResponse {
        mdl: u16,
        accepted: bool,
    },
    McapConfig {
        mdl: u16,
        config: ChannelConfig,
    },
    McapConfigConfirm {
        mdl: u16,
    },
    McapReconnectRequest {
        mdl: u16,
    },
    McapReconnectResponse {
        mdl: u16,
        accepted: bool,
    },
    AssocRequest {
        assoc: u32,
        specialization: Specialization,
        config_id: u16,
    },
    AssocResponse {
        assoc: u32,
        accepted: bool,
    },
    AssocConfirm {
        assoc: u32,
    },
}

impl ControlPdu {
    /// MCAP message names as they appear in the trace.
    pub fn mcap_name(&self) -> Option<(&'static str, &'static str)> {
        Some(match self {
            ControlPdu::McapCreateRequest { .. } => ("create", "request"),
            ControlPdu::McapCreateResponse { .. } => ("create", "accept"),
            ControlPdu::McapConfig { .. } => ("create", "config"),
            ControlPdu::McapConfigConfirm { .. } => ("create", "confirm"),
            ControlPdu::McapReconnectRequest { .. } => ("reconnect", "request"),
            ControlPdu::McapReconnectResponse { .. } => ("reconnect", "accept"),
            _ => return None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn envelope_round_trip() {
        let env = Envelope {
            to: DeviceAddress::new(0x42).unwrap(),
            pdu: LinkPdu::MdlData {
                link: LinkId(3),
                mdl: 1,
                seq: 9,
                clock_us: 77,
                data: vec![1, 2, 3],
            },
        };
        assert_eq!(Envelope::decode(&env.encode()), Some(env));
        assert_eq!(Envelope::decode(b"not json"), None);
    }
}
