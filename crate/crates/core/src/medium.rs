//! The shared radio medium: who hears a frame, and which copies get lost.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::address::DeviceAddress;
use crate::device::DeviceConfig;
use crate::time::SimTime;

/// Number of discovery frequencies.
pub const FREQ_COUNT: u8 = 32;

/// Every delivery arrives this long after transmission.
pub const PROPAGATION_DELAY_US: u64 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MediumError {
    #[error("frequency index {0} outside 0..=31")]
    BadFrequency(u8),
    #[error("loss probability {0} outside [0, 1]")]
    BadLossProbability(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Inquiry,
    InquiryResponse,
    Page,
    LinkData,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RadioFrame {
    pub from: DeviceAddress,
    freq_index: u8,
    pub kind: FrameKind,
    pub payload: Vec<u8>,
}

impl RadioFrame {
    pub fn new(
        from: DeviceAddress,
        freq_index: u8,
        kind: FrameKind,
        payload: Vec<u8>,
    ) -> Result<Self, MediumError> {
        if freq_index >= FREQ_COUNT {
            return Err(MediumError::BadFrequency(freq_index));
        }
        Ok(Self {
            from,
            freq_index,
            kind,
            payload,
        })
    }

    pub fn freq_index(&self) -> u8 {
        self.freq_index
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MediumModel {
    pub loss_probability: f64,
    pub rng_seed: u64,
}

impl Default for MediumModel {
    fn default() -> Self {
        Self {
            loss_probability: 0.0,
            rng_seed: 0,
        }
    }
}

/// A potential receiver as seen by the medium at transmit time.
#[derive(Debug, Clone, Copy)]
pub struct Listener<'a> {
    pub config: &'a DeviceConfig,
    pub listening: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub to: DeviceAddress,
    pub at: SimTime,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MediumStats {
    /// Candidate deliveries (in range and listening).
    pub opportunities: u64,
    pub dropped: u64,
}

/// Seeded i.i.d. Bernoulli loss over a range-limited broadcast medium.
#[derive(Debug, Clone)]
pub struct Medium {
    model: MediumModel,
    rng: ChaCha8Rng,
    stats: MediumStats,
}

impl Medium {
    pub fn new(model: MediumModel) -> Result<Self, MediumError> {
        check_probability(model.loss_probability)?;
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(model.rng_seed),
            model,
            stats: MediumStats::default(),
        })
    }

    pub fn model(&self) -> MediumModel {
        self.model
    }

    pub fn stats(&self) -> MediumStats {
        self.stats
    }

    /// Changes the loss probability from now on. The generator is not
    /// reseeded.
    pub fn set_loss_probability(&mut self, p: f64) -> Result<(), MediumError> {
        check_probability(p)?;
        self.model.loss_probability = p;
        Ok(())
    }

    /// Delivers `frame` to every listener in range of `from` that is
    /// listening, dropping each copy independently. Listeners are visited in
    /// the given order, which callers keep deterministic.
    pub fn broadcast<'a, I>(
        &mut self,
        frame: &RadioFrame,
        from: &DeviceConfig,
        listeners: I,
        now: SimTime,
    ) -> Vec<Delivery>
    where
        I: IntoIterator<Item = Listener<'a>>,
    {
        let mut out = Vec::new();
        for listener in listeners {
            let to = listener.config.address;
            if to == frame.from || !listener.listening || !from.reaches(listener.config) {
                continue;
            }
            self.stats.opportunities += 1;
            if self.rng.gen::<f64>() < self.model.loss_probability {
                self.stats.dropped += 1;
                continue;
            }
            out.push(Delivery {
                to,
                at: now + PROPAGATION_DELAY_US,
            });
        }
        out
    }
}

fn check_probability(p: f64) -> Result<(), MediumError> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(MediumError::BadLossProbability(p))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::address::DeviceName;
    use crate::device::Position;

    fn dev(addr: u64, x: f64, range: f64) -> DeviceConfig {
        DeviceConfig::new(
            DeviceAddress::new(addr).unwrap(),
            DeviceName::new(format!("d{addr}")).unwrap(),
            Position::new(x, 0.0),
        )
        .with_range(range)
    }

    fn frame(from: u64, freq: u8) -> RadioFrame {
        RadioFrame::new(
            DeviceAddress::new(from).unwrap(),
            freq,
            FrameKind::Inquiry,
            vec![],
        )
        .unwrap()
    }

    #[test]
    fn frequency_bounds() {
        assert!(
            RadioFrame::new(DeviceAddress::new(1).unwrap(), 31, FrameKind::Page, vec![]).is_ok()
        );
        assert_eq!(
            RadioFrame::new(DeviceAddress::new(1).unwrap(), 32, FrameKind::Page, vec![]),
            Err(MediumError::BadFrequency(32))
        );
    }

    #[test]
    fn one_meter_apart_delivers_once() {
        let mut medium = Medium::new(MediumModel::default()).unwrap();
        let a = dev(1, 0.0, 10.0);
        let b = dev(2, 1.0, 10.0);
        let got = medium.broadcast(
            &frame(1, 4),
            &a,
            [Listener {
                config: &b,
                listening: true,
            }],
            SimTime::from_micros(100),
        );
        assert_eq!(
            got,
            vec![Delivery {
                to: b.address,
                at: SimTime::from_micros(101)
            }]
        );
    }

    #[test]
    fn off_frequency_and_out_of_range_receive_nothing() {
        let mut medium = Medium::new(MediumModel::default()).unwrap();
        let a = dev(1, 0.0, 10.0);
        let off_freq = dev(2, 1.0, 10.0);
        let far = dev(3, 10.5, 10.0);
        // Range is the smaller of the two.
        let short = dev(4, 6.0, 5.0);
        let got = medium.broadcast(
            &frame(1, 6),
            &a,
            [
                Listener {
                    config: &off_freq,
                    listening: false,
                },
                Listener {
                    config: &far,
                    listening: true,
                },
                Listener {
                    config: &short,
                    listening: true,
                },
            ],
            SimTime::ZERO,
        );
        assert!(got.is_empty());
        assert_eq!(medium.stats().opportunities, 0);
    }

    #[test]
    fn sender_never_hears_itself() {
        let mut medium = Medium::new(MediumModel::default()).unwrap();
        let a = dev(1, 0.0, 10.0);
        let got = medium.broadcast(
            &frame(1, 0),
            &a,
            [Listener {
                config: &a,
                listening: true,
            }],
            SimTime::ZERO,
        );
        assert!(got.is_empty());
    }

    #[test]
    fn certain_loss_drops_everything() {
        let mut medium = Medium::new(MediumModel {
            loss_probability: 1.0,
            rng_seed: 3,
        })
        .unwrap();
        let a = dev(1, 0.0, 10.0);
        let b = dev(2, 1.0, 10.0);
        for _ in 0..100 {
            let got = medium.broadcast(
                &frame(1, 0),
                &a,
                [Listener {
                    config: &b,
                    listening: true,
                }],
                SimTime::ZERO,
            );
            assert!(got.is_empty());
        }
        assert_eq!(medium.stats().dropped, 100);
    }

    #[test]
    fn rejects_bad_probability() {
        assert!(Medium::new(MediumModel {
            loss_probability: 1.5,
            rng_seed: 0
        })
        .is_err());
        let mut m = Medium::new(MediumModel::default()).unwrap();
        assert!(m.set_loss_probability(-0.1).is_err());
    }

    #[test]
    fn drop_fraction_within_five_sigma() {
        let a = dev(1, 0.0, 10.0);
        let listeners: Vec<DeviceConfig> = (2..12).map(|i| dev(i, 1.0, 10.0)).collect();
        for (seed, p) in [(1u64, 0.1f64), (2, 0.5), (3, 0.9), (4, 0.25)] {
            let mut medium = Medium::new(MediumModel {
                loss_probability: p,
                rng_seed: seed,
            })
            .unwrap();
            for _ in 0..2_000 {
                medium.broadcast(
                    &frame(1, 0),
                    &a,
                    listeners.iter().map(|c| Listener {
                        config: c,
                        listening: true,
                    }),
                    SimTime::ZERO,
                );
            }
            let stats = medium.stats();
            let n = stats.opportunities as f64;
            assert_eq!(stats.opportunities, 20_000);
            let sigma = (p * (1.0 - p) / n).sqrt();
            let observed = stats.dropped as f64 / n;
            assert!(
                (observed - p).abs() <= 5.0 * sigma,
                "p={p} observed={observed} sigma={sigma}"
            );
        }
    }
}
