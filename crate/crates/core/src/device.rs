use serde::{Deserialize, Serialize};

use crate::address::{DeviceAddress, DeviceName};

/// A point on the simulation floor, in meters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Position {
    pub x: f64,
    pub y: f64,
}

impl Position {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Position) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Static description of one simulated device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub address: DeviceAddress,
    pub name: DeviceName,
    pub position: Position,
    pub radio_range_m: f64,
    /// Device-local clock minus simulation clock.
    pub clock_offset_us: i64,
    /// Uniform noise, in microseconds either way, on every clock reading the
    /// device stamps into a clock-sync reply.
    pub clock_jitter_us: u64,
    /// Shifts the device's inquiry-scan window schedule.
    pub scan_phase_us: u64,
}

impl DeviceConfig {
    pub fn new(address: DeviceAddress, name: DeviceName, position: Position) -> Self {
        Self {
            address,
            name,
            position,
            radio_range_m: 10.0,
            clock_offset_us: 0,
            clock_jitter_us: 0,
            scan_phase_us: 0,
        }
    }

    pub fn with_range(mut self, range_m: f64) -> Self {
        self.radio_range_m = range_m;
        self
    }

    pub fn with_clock_offset(mut self, offset_us: i64) -> Self {
        self.clock_offset_us = offset_us;
        self
    }

    pub fn with_clock_jitter(mut self, jitter_us: u64) -> Self {
        self.clock_jitter_us = jitter_us;
        self
    }

    pub fn with_scan_phase(mut self, phase_us: u64) -> Self {
        self.scan_phase_us = phase_us;
        self
    }

    /// Both devices must be inside the smaller of the two radio ranges.
    pub fn reaches(&self, other: &DeviceConfig) -> bool {
        let range = self.radio_range_m.min(other.radio_range_m);
        self.position.distance(other.position) <= range
    }
}
