//! Protocol timers and limits. Every field may be overridden per scenario.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    /// Length of one inquiry-scan window; the scanner moves to the next of
    /// the 32 frequencies every window.
    pub scan_window_us: u64,
    /// One inquiry cycle transmits on all 32 frequencies.
    pub inquiry_cycle_us: u64,
    pub page_timeout_us: u64,
    /// Spacing of repeated page frames, including re-pages of lost links.
    pub page_retry_interval_us: u64,
    pub keepalive_interval_us: u64,
    pub keepalive_miss_threshold: u32,
    pub retransmit_interval_us: u64,
    pub sync_timeout_us: u64,
    /// Upper bound on how long a control handshake may run before it is
    /// reported as a link failure.
    pub control_timeout_us: u64,
    pub hop_interval_us: u64,
    pub page_size_bytes: u32,
    pub freq_low: u8,
    pub freq_high: u8,
    /// Aggregate piconet rate cap. The default is the 723.2 kbit/s
    /// asymmetric ACL rate of a v1.2 radio.
    pub rate_cap_bps: u64,
    pub source_buffer_capacity: usize,
    pub max_payload_bytes: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            scan_window_us: 1_280_000,
            inquiry_cycle_us: 10_000,
            page_timeout_us: 5_120_000,
            page_retry_interval_us: 10_000,
            keepalive_interval_us: 1_000_000,
            keepalive_miss_threshold: 3,
            retransmit_interval_us: 100_000,
            sync_timeout_us: 1_000_000,
            control_timeout_us: 30_000_000,
            hop_interval_us: 625,
            page_size_bytes: 1024,
            freq_low: 0,
            freq_high: 31,
            rate_cap_bps: 723_200,
            source_buffer_capacity: 1024,
            max_payload_bytes: 1024,
        }
    }
}

impl SimConfig {
    /// Returns the first violated rule as `(field, rule)`.
    pub fn validate(&self) -> Result<(), (&'static str, &'static str)> {
        let positive: [(&'static str, u64); 10] = [
            ("scan_window_us", self.scan_window_us),
            ("inquiry_cycle_us", self.inquiry_cycle_us),
            ("page_timeout_us", self.page_timeout_us),
            ("page_retry_interval_us", self.page_retry_interval_us),
            ("keepalive_interval_us", self.keepalive_interval_us),
            ("retransmit_interval_us", self.retransmit_interval_us),
            ("sync_timeout_us", self.sync_timeout_us),
            ("control_timeout_us", self.control_timeout_us),
            ("hop_interval_us", self.hop_interval_us),
            ("rate_cap_bps", self.rate_cap_bps),
        ];
        for (field, value) in positive {
            if value == 0 {
                return Err((field, "must be positive"));
            }
        }
        if self.inquiry_cycle_us < 32 {
            return Err(("inquiry_cycle_us", "must leave at least 1 us per frequency"));
        }
        if self.keepalive_miss_threshold == 0 {
            return Err(("keepalive_miss_threshold", "must be positive"));
        }
        if self.page_size_bytes == 0 {
            return Err(("page_size_bytes", "must be positive"));
        }
        if self.freq_high > 31 {
            return Err(("freq_high", "must be at most 31"));
        }
        if self.freq_low > self.freq_high {
            return Err(("freq_low", "must not exceed freq_high"));
        }
        if self.source_buffer_capacity == 0 {
            return Err(("source_buffer_capacity", "must be positive"));
        }
        if self.max_payload_bytes == 0 {
            return Err(("max_payload_bytes", "must be positive"));
        }
        Ok(())
    }
}
