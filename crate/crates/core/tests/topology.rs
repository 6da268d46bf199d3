mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::{addr, device};
use hdpsim::link::MAX_ACTIVE_SLAVES;
use hdpsim::{DeviceAddress, InquiryParams, LinkError, Simulation, Trace};
use proptest::prelude::*;

/// Rebuilds piconet membership from the trace alone and checks the
/// structural rules after every event.
fn scan_trace(trace: &Trace) -> Result<(), String> {
    let mut links: BTreeMap<u64, (DeviceAddress, DeviceAddress)> = BTreeMap::new();
    for rec in trace.records() {
        match rec.ev.as_str() {
            "connected" | "role_switch" => {
                let id = rec.detail["link"].as_u64().unwrap();
                let master: DeviceAddress =
                    serde_json::from_value(rec.detail["master"].clone()).unwrap();
                let slave: DeviceAddress =
                    serde_json::from_value(rec.detail["slave"].clone()).unwrap();
                links.insert(id, (master, slave));
            }
            _ => continue,
        }
        let mut piconets: BTreeMap<DeviceAddress, BTreeSet<DeviceAddress>> = BTreeMap::new();
        for (master, slave) in links.values() {
            if !piconets.entry(*master).or_default().insert(*slave) {
                return Err(format!("{slave} linked twice to {master} at {}", rec.t_us));
            }
        }
        for (master, slaves) in &piconets {
            if slaves.len() > MAX_ACTIVE_SLAVES {
                return Err(format!(
                    "{master} has {} slaves at {}",
                    slaves.len(),
                    rec.t_us
                ));
            }
            if slaves.contains(master) {
                return Err(format!("{master} is its own slave at {}", rec.t_us));
            }
        }
    }
    Ok(())
}

fn crowd(n: u64, seed: u64) -> Simulation {
    let mut sim = Simulation::with_seed(seed);
    for v in 1..=n {
        sim.add_device(device(v, (v % 4) as f64)).unwrap();
    }
    for v in 1..=n {
        sim.inquire(
            addr(v),
            InquiryParams {
                duration_us: 50_000,
                max_responses: Some(n as usize - 1),
            },
        )
        .unwrap();
    }
    sim
}

#[test]
fn seven_slaves_then_piconet_full() {
    let mut sim = crowd(9, 1);
    for v in 2..=8 {
        sim.page(addr(1), addr(v)).unwrap();
    }
    assert_eq!(
        sim.page(addr(1), addr(9)),
        Err(LinkError::PiconetFull(addr(1)))
    );
    assert_eq!(sim.piconet(addr(1)).unwrap().slaves().len(), 7);
    // Device 2 also serves as slave to 9: a scatternet.
    sim.page(addr(9), addr(2)).unwrap();
    assert_eq!(sim.masters_of(addr(2)), vec![addr(1), addr(9)]);
    scan_trace(sim.trace()).unwrap();
    assert!(sim.violations().is_empty());
}

#[derive(Debug, Clone)]
enum Op {
    Page(u64, u64),
    Switch(u64, u64),
    Drop(u64, u64),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (1u64..=10, 1u64..=10).prop_map(|(a, b)| Op::Page(a, b)),
        2 => (1u64..=10, 1u64..=10).prop_map(|(a, b)| Op::Switch(a, b)),
        1 => (1u64..=10, 1u64..=10).prop_map(|(a, b)| Op::Drop(a, b)),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn random_topology_changes_keep_the_rules(seed in 0u64..1000, ops in proptest::collection::vec(op(), 1..40)) {
        let mut sim = crowd(10, seed);
        for op in ops {
            match op {
                Op::Page(a, b) => {
                    let _ = sim.page(addr(a), addr(b));
                }
                Op::Switch(a, b) => {
                    if let Some(id) = sim.link_between(addr(a), addr(b)) {
                        let _ = sim.role_switch(id);
                    }
                }
                Op::Drop(a, b) => {
                    if let Some(id) = sim.link_between(addr(a), addr(b)) {
                        let _ = sim.drop_link(id);
                    }
                }
            }
            for p in sim.piconets() {
                prop_assert!(p.slaves().len() <= MAX_ACTIVE_SLAVES);
            }
        }
        let t = sim.now() + 2_000_000;
        sim.run_until(t);
        prop_assert!(scan_trace(sim.trace()).is_ok(), "{:?}", scan_trace(sim.trace()));
        prop_assert!(sim.violations().is_empty());
    }
}
