//! Pairing, mutual authentication and the payload cipher.
//!
//! All three are built on one keyed PRF (HMAC-SHA256 truncated to 16 bytes)
//! with a distinct domain prefix per use. The shapes follow the classic
//! Bluetooth chain: an initialization key from PIN, address and a random
//! number, a two-way challenge-response, and an XOR keystream cipher keyed
//! by the link key and the clock. None of it is bit-compatible with the real
//! algorithms.

use std::collections::BTreeMap;
use std::fmt;

use hmac::{Hmac, KeyInit, Mac};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::address::DeviceAddress;
use crate::link::{LinkError, LinkId, LinkState};
use crate::pdu::ControlPdu;
use crate::sim::Simulation;
use crate::time::SimTime;
use crate::trace::hex_string;

const DOMAIN_INIT_KEY: &[u8] = b"E22";
const DOMAIN_AUTH: &[u8] = b"AUTH";
const DOMAIN_CIPHER: &[u8] = b"E0";

pub const MAX_PIN_LEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SecurityError {
    #[error("PIN must not be empty")]
    EmptyPin,
    #[error("PIN is {0} bytes, at most 16 allowed")]
    PinTooLong(usize),
    #[error(transparent)]
    Link(#[from] LinkError),
    #[error("{a} and {b} share no link")]
    NoLink { a: DeviceAddress, b: DeviceAddress },
    #[error("link {0:?} has not been paired")]
    NotPaired(LinkId),
    #[error("authentication on link {0:?} did not finish in time")]
    Timeout(LinkId),
}

impl SecurityError {
    pub fn kind(&self) -> &'static str {
        match self {
            SecurityError::EmptyPin => "EmptyPin",
            SecurityError::PinTooLong(_) => "PinTooLong",
            SecurityError::Link(e) => e.kind(),
            SecurityError::NoLink { .. } => "NoLink",
            SecurityError::NotPaired(_) => "NotPaired",
            SecurityError::Timeout(_) => "Timeout",
        }
    }
}

#[derive(Clone, PartialEq, Eq)]
pub struct Pin(Vec<u8>);

impl Pin {
    pub fn new(digits: impl Into<Vec<u8>>) -> Result<Self, SecurityError> {
        let digits = digits.into();
        if digits.is_empty() {
            return Err(SecurityError::EmptyPin);
        }
        if digits.len() > MAX_PIN_LEN {
            return Err(SecurityError::PinTooLong(digits.len()));
        }
        Ok(Self(digits))
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }
}

// PINs stay out of logs.
impl fmt::Debug for Pin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Pin(<{} bytes>)", self.0.len())
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct LinkKey([u8; 16]);

impl LinkKey {
    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    /// First 8 hex characters of SHA-256 over the key, for correlating
    /// trace events without revealing the key.
    pub fn fingerprint(&self) -> String {
        let digest = Sha256::digest(self.0);
        hex_string(&digest[..4])
    }
}

impl fmt::Debug for LinkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LinkKey({})", self.fingerprint())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AuthOutcome {
    Success,
    Failure,
}

/// The keyed PRF behind every security primitive.
pub fn prf(domain: &[u8], key: &[u8], message: &[u8]) -> [u8; 16] {
    let mut mac =
        <Hmac<Sha256> as KeyInit>::new_from_slice(key).expect("HMAC accepts any key length");
    mac.update(domain);
    mac.update(&[0]);
    mac.update(message);
    let full = mac.finalize().into_bytes();
    let mut out = [0u8; 16];
    out.copy_from_slice(&full[..16]);
    out
}

pub fn derive_init_key(pin: &Pin, addr: DeviceAddress, rand: &[u8; 16]) -> LinkKey {
    let mut key = pin.as_bytes().to_vec();
    key.extend_from_slice(&addr.octets());
    LinkKey(prf(DOMAIN_INIT_KEY, &key, rand))
}

/// What a claimant returns for `challenge`.
pub fn auth_response(key: &LinkKey, challenge: &[u8; 16], claimant: DeviceAddress) -> [u8; 16] {
    let mut msg = challenge.to_vec();
    msg.extend_from_slice(&claimant.octets());
    prf(DOMAIN_AUTH, &key.0, &msg)
}

pub fn verify_response(
    key: &LinkKey,
    challenge: &[u8; 16],
    claimant: DeviceAddress,
    response: &[u8; 16],
) -> bool {
    auth_response(key, challenge, claimant) == *response
}

/// Two-way challenge-response evaluated directly on both keys: `a` checks
/// `b` with `challenge_a`, then `b` checks `a` with `challenge_b`.
pub fn mutual_authenticate(
    a: (DeviceAddress, &LinkKey),
    b: (DeviceAddress, &LinkKey),
    challenge_a: &[u8; 16],
    challenge_b: &[u8; 16],
) -> AuthOutcome {
    let b_ok = verify_response(a.1, challenge_a, b.0, &auth_response(b.1, challenge_a, b.0));
    let a_ok = verify_response(b.1, challenge_b, a.0, &auth_response(a.1, challenge_b, a.0));
    if a_ok && b_ok {
        AuthOutcome::Success
    } else {
        AuthOutcome::Failure
    }
}

/// XORs `payload` with the keystream for `(key, clock)`. Applying it twice
/// with the same arguments returns the original bytes.
pub fn apply_cipher(key: &LinkKey, clock: SimTime, payload: &[u8]) -> Vec<u8> {
    let clock = clock.as_micros().to_be_bytes();
    let mut out = Vec::with_capacity(payload.len());
    for (block_index, chunk) in payload.chunks(16).enumerate() {
        let mut msg = clock.to_vec();
        msg.extend_from_slice(&(block_index as u32).to_be_bytes());
        let stream = prf(DOMAIN_CIPHER, &key.0, &msg);
        out.extend(chunk.iter().zip(stream).map(|(p, k)| p ^ k));
    }
    out
}

/// Per-link pairing and authentication progress. Keys are held per
/// endpoint so that a PIN mismatch leaves the two sides with different keys.
#[derive(Debug, Clone, Default)]
pub(crate) struct AuthState {
    pub authenticated: bool,
    keys: BTreeMap<DeviceAddress, LinkKey>,
    pending_pin: BTreeMap<DeviceAddress, Pin>,
    /// Verifier -> challenge it issued.
    issued: BTreeMap<DeviceAddress, [u8; 16]>,
    /// Claimant -> challenge received before it had a key.
    stashed: BTreeMap<DeviceAddress, [u8; 16]>,
    /// Verifier -> its verdict on the peer.
    verdicts: BTreeMap<DeviceAddress, bool>,
    running: bool,
}

impl AuthState {
    pub fn key_of(&self, dev: DeviceAddress) -> Option<&LinkKey> {
        self.keys.get(&dev)
    }

    fn reset_round(&mut self) {
        self.issued.clear();
        self.stashed.clear();
        self.verdicts.clear();
        self.running = true;
    }
}

impl Simulation {
    /// Pairs the devices on their shared link. Each side enters its own PIN;
    /// `a` draws the random number and starts the exchange. Authentication
    /// follows immediately. A PIN mismatch is reported as `Failure`, not as
    /// an error.
    pub fn pair(
        &mut self,
        a: DeviceAddress,
        b: DeviceAddress,
        pin_a: &Pin,
        pin_b: &Pin,
    ) -> Result<AuthOutcome, SecurityError> {
        let id = self
            .link_between(a, b)
            .ok_or(SecurityError::NoLink { a, b })?;
        self.connected_link(id)?;
        let in_rand: [u8; 16] = self.random_bytes();
        let key_a = derive_init_key(pin_a, b, &in_rand);
        let link = self.links.get_mut(id).expect("checked");
        link.auth.keys.clear();
        link.auth.keys.insert(a, key_a);
        link.auth.pending_pin.insert(b, pin_b.clone());
        link.auth.authenticated = false;
        link.auth.reset_round();
        self.send_ctrl(id, a, ControlPdu::PairRand { in_rand });
        self.issue_challenge(id, a);
        self.finish_auth(id, a)
    }

    /// Repeats the challenge-response with fresh challenges and the keys
    /// established by an earlier `pair`.
    pub fn authenticate(
        &mut self,
        id: LinkId,
        initiator: DeviceAddress,
    ) -> Result<AuthOutcome, SecurityError> {
        let link = self.connected_link(id)?;
        let peer = link.peer_of(initiator);
        if link.auth.key_of(initiator).is_none() || link.auth.key_of(peer).is_none() {
            return Err(SecurityError::NotPaired(id));
        }
        let link = self.links.get_mut(id).expect("checked");
        link.auth.authenticated = false;
        link.auth.reset_round();
        self.issue_challenge(id, initiator);
        self.issue_challenge(id, peer);
        self.finish_auth(id, initiator)
    }

    fn finish_auth(
        &mut self,
        id: LinkId,
        initiator: DeviceAddress,
    ) -> Result<AuthOutcome, SecurityError> {
        let deadline = self.now() + self.config.control_timeout_us;
        self.drive_until(deadline, |sim| {
            sim.links
                .get(id)
                .is_none_or(|l| l.state() != LinkState::Connected || l.auth.verdicts.len() == 2)
        });
        let link = self
            .links
            .get_mut(id)
            .expect("links are never removed once connected");
        link.auth.running = false;
        if link.state() != LinkState::Connected {
            return Err(LinkError::LinkDown(id).into());
        }
        if link.auth.verdicts.len() < 2 {
            return Err(SecurityError::Timeout(id));
        }
        let ok = link.auth.verdicts.values().all(|&v| v);
        link.auth.authenticated = ok;
        let peer = link.peer_of(initiator);
        let key_hash = link.auth.key_of(initiator).map(LinkKey::fingerprint);
        let (ev, outcome) = if ok {
            ("auth_ok", AuthOutcome::Success)
        } else {
            ("auth_fail", AuthOutcome::Failure)
        };
        self.trace_event(
            ev,
            initiator,
            json!({ "link": id.0, "peer": peer, "key_hash": key_hash }),
        );
        Ok(outcome)
    }

    fn issue_challenge(&mut self, id: LinkId, verifier: DeviceAddress) {
        let challenge: [u8; 16] = self.random_bytes();
        if let Some(link) = self.links.get_mut(id) {
            link.auth.issued.insert(verifier, challenge);
        }
        self.send_ctrl(id, verifier, ControlPdu::AuthChallenge { challenge });
    }

    fn answer_challenge(&mut self, id: LinkId, claimant: DeviceAddress, challenge: [u8; 16]) {
        let Some(link) = self.links.get_mut(id) else {
            return;
        };
        match link.auth.key_of(claimant) {
            Some(key) => {
                let response = auth_response(key, &challenge, claimant);
                self.send_ctrl(id, claimant, ControlPdu::AuthResponse { response });
            }
            None => {
                link.auth.stashed.insert(claimant, challenge);
            }
        }
    }

    pub(crate) fn on_security_ctrl(
        &mut self,
        id: LinkId,
        from: DeviceAddress,
        to: DeviceAddress,
        body: ControlPdu,
    ) {
        let Some(link) = self.links.get_mut(id) else {
            return;
        };
        if !link.auth.running {
            return;
        }
        match body {
            ControlPdu::PairRand { in_rand } => {
                let Some(pin) = link.auth.pending_pin.remove(&to) else {
                    return;
                };
                // Both sides key on the responder's address.
                link.auth
                    .keys
                    .insert(to, derive_init_key(&pin, to, &in_rand));
                let stashed = link.auth.stashed.remove(&to);
                self.issue_challenge(id, to);
                if let Some(challenge) = stashed {
                    self.answer_challenge(id, to, challenge);
                }
            }
            ControlPdu::AuthChallenge { challenge } => self.answer_challenge(id, to, challenge),
            ControlPdu::AuthResponse { response } => {
                let verdict = match (link.auth.issued.get(&to), link.auth.key_of(to)) {
                    (Some(challenge), Some(key)) => {
                        verify_response(key, challenge, from, &response)
                    }
                    _ => false,
                };
                link.auth.verdicts.insert(to, verdict);
            }
            _ => {}
        }
    }

    /// The key `dev` holds for link `id`, if paired.
    pub fn link_key(&self, id: LinkId, dev: DeviceAddress) -> Option<LinkKey> {
        self.links.get(id).and_then(|l| l.auth.key_of(dev).copied())
    }
}
