mod common;

use std::collections::BTreeSet;

use common::{addr, device, pulse_world, SOURCE};
use hdpsim::{Measurement, Position, SimConfig, TimedAction};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Disturbance {
    Away,
    Back,
    Loss(f64),
    Drop,
}

fn disturbance() -> impl Strategy<Value = Disturbance> {
    prop_oneof![
        Just(Disturbance::Away),
        Just(Disturbance::Back),
        (0.0f64..0.4).prop_map(Disturbance::Loss),
        Just(Disturbance::Drop),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sink_receives_each_measurement_at_most_once_in_order(
        seed in 0u64..10_000,
        capacity in 4usize..40,
        schedule in proptest::collection::vec((0u64..30_000_000, disturbance()), 0..12),
    ) {
        let config = SimConfig { source_buffer_capacity: capacity, ..SimConfig::default() };
        let mut p = pulse_world(seed, config, device(SOURCE, 2.0));
        let start = p.sim.now();
        for i in 0..60u64 {
            p.sim.schedule_action(start + i * 500_000, TimedAction::SendMeasurement {
                assoc: p.assoc,
                measurement: Measurement::heart_rate(600 + i as i32, 2000, 250),
            }).unwrap();
        }
        for (at, d) in schedule {
            let action = match d {
                Disturbance::Away => TimedAction::MoveDevice { device: addr(SOURCE), position: Position::new(60.0, 0.0) },
                Disturbance::Back => TimedAction::MoveDevice { device: addr(SOURCE), position: Position::new(2.0, 0.0) },
                Disturbance::Loss(p) => TimedAction::SetLossProbability(p),
                Disturbance::Drop => TimedAction::DropLink { a: common::addr(common::SINK), b: addr(SOURCE) },
            };
            p.sim.schedule_action(start + at, action).unwrap();
        }
        // Calm down, let everything drain, then close the books.
        let calm = start + 31_000_000;
        p.sim.schedule_action(calm, TimedAction::SetLossProbability(0.0)).unwrap();
        p.sim.schedule_action(calm, TimedAction::MoveDevice { device: addr(SOURCE), position: Position::new(2.0, 0.0) }).unwrap();
        p.sim.run_until(calm + 20_000_000);
        p.sim.release(p.assoc).unwrap();

        let a = p.sim.association(p.assoc).unwrap();
        let c = a.counters();
        let received: Vec<u32> = a.sink_log().iter().map(|s| s.measurement.seq).collect();
        prop_assert!(received.windows(2).all(|w| w[0] < w[1]), "not strictly increasing: {:?}", received);
        let evicted: BTreeSet<u32> = p.sim.trace().events("evicted")
            .map(|r| r.detail["seq"].as_u64().unwrap() as u32).collect();
        let sent: BTreeSet<u32> = p.sim.trace().events("measurement_tx")
            .map(|r| r.detail["seq"].as_u64().unwrap() as u32).collect();
        prop_assert_eq!(sent.len() as u64, c.sent);
        for s in &received {
            prop_assert!(sent.contains(s));
            prop_assert!(!evicted.contains(s));
        }
        prop_assert_eq!(c.evicted, evicted.len() as u64);
        prop_assert_eq!(c.delivered, received.len() as u64);
        prop_assert_eq!(c.sent, c.delivered + c.evicted + c.abandoned);
        prop_assert!(p.sim.violations().is_empty(), "{:?}", p.sim.violations());
    }
}

#[test]
fn clean_run_delivers_everything() {
    let mut p = pulse_world(9, SimConfig::default(), device(SOURCE, 2.0));
    let start = p.sim.now();
    for i in 0..30u64 {
        p.sim
            .schedule_action(
                start + i * 1_000_000,
                TimedAction::SendMeasurement {
                    assoc: p.assoc,
                    measurement: Measurement::heart_rate(700, 2000, 250),
                },
            )
            .unwrap();
    }
    p.sim.run_until(start + 31_000_000);
    let c = p.sim.association(p.assoc).unwrap().counters();
    assert_eq!(
        (c.sent, c.delivered, c.acked, c.evicted, c.buffered),
        (30, 30, 30, 0, 0)
    );
}
