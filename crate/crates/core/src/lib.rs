//! Deterministic discrete-event simulation of a Bluetooth health-device
//! stack: discovery, piconets, pairing, an MCAP-style channel manager and
//! the health-device application layer on top.
//!
//! Everything runs on one virtual clock in whole microseconds. A run is a
//! pure function of its inputs and seed, and its trace can be hashed to
//! check that.

pub mod address;
pub mod config;
pub mod device;
pub mod discovery;
pub mod engine;
pub mod hdp;
pub mod link;
pub mod mcap;
pub mod medium;
mod pdu;
pub mod security;
pub mod sim;
pub mod time;
pub mod trace;

pub use address::{DeviceAddress, DeviceName};
pub use config::SimConfig;
pub use device::{DeviceConfig, Position};
pub use discovery::{ConnectabilityMode, DiscoverabilityMode, InquiryParams};
pub use hdp::{AssocId, HdpRole, Measurement, Specialization};
pub use link::{LinkError, LinkId, LinkState};
pub use mcap::{ChannelConfig, ChannelMode, ClockSyncResult};
pub use medium::MediumModel;
pub use security::{AuthOutcome, Pin};
pub use sim::{InvariantViolation, PairKey, SimError, Simulation, TimedAction};
pub use time::SimTime;
pub use trace::{Trace, TraceRecord};
