#![allow(dead_code)]

use hdpsim::{
    AssocId, AuthOutcome, DeviceAddress, DeviceConfig, DeviceName, HdpRole, InquiryParams, LinkId,
    MediumModel, Pin, Position, SimConfig, Simulation, Specialization,
};

pub const SINK: u64 = 0x00_1A_7D_DA_71_01;
pub const SOURCE: u64 = 0x00_1A_7D_DA_71_02;

pub fn addr(v: u64) -> DeviceAddress {
    DeviceAddress::new(v).unwrap()
}

pub fn device(v: u64, x: f64) -> DeviceConfig {
    DeviceConfig::new(
        addr(v),
        DeviceName::new(format!("dev-{v:x}")).unwrap(),
        Position::new(x, 0.0),
    )
}

pub struct Pulse {
    pub sim: Simulation,
    pub link: LinkId,
    pub assoc: AssocId,
}

/// A sink and a heart-rate source, paired and associated over a clean
/// medium. `source` lets callers tweak the source's clock.
pub fn pulse_world(seed: u64, config: SimConfig, source: DeviceConfig) -> Pulse {
    let mut sim = Simulation::new(
        MediumModel {
            loss_probability: 0.0,
            rng_seed: seed,
        },
        config,
    )
    .unwrap();
    sim.add_device(device(SINK, 0.0)).unwrap();
    let source_addr = source.address;
    sim.add_device(source).unwrap();
    sim.set_hdp_role(addr(SINK), HdpRole::Sink { accepts: None })
        .unwrap();
    sim.set_hdp_role(source_addr, HdpRole::Source).unwrap();
    sim.inquire(addr(SINK), InquiryParams::new(50_000)).unwrap();
    let link = sim.page(addr(SINK), source_addr).unwrap();
    let pin = Pin::new(*b"2468").unwrap();
    assert_eq!(
        sim.pair(addr(SINK), source_addr, &pin, &pin),
        Ok(AuthOutcome::Success)
    );
    sim.open_control_channel(link).unwrap();
    let assoc = sim
        .associate(source_addr, addr(SINK), Specialization::HeartRate)
        .unwrap();
    Pulse { sim, link, assoc }
}
