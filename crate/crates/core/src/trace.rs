//! The deterministic record of a run, one JSON object per line.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::address::DeviceAddress;
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t_us: u64,
    pub seq: u64,
    pub ev: String,
    pub dev: DeviceAddress,
    pub detail: Value,
}

#[derive(Debug, Clone, Default)]
pub struct Trace {
    records: Vec<TraceRecord>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, at: SimTime, ev: &str, dev: DeviceAddress, detail: Value) {
        let seq = self.records.len() as u64;
        self.records.push(TraceRecord {
            t_us: at.as_micros(),
            seq,
            ev: ev.to_string(),
            dev,
            detail,
        });
    }

    pub fn records(&self) -> &[TraceRecord] {
        &self.records
    }

    pub fn since(&self, index: usize) -> &[TraceRecord] {
        &self.records[index.min(self.records.len())..]
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn events<'a>(&'a self, ev: &'a str) -> impl Iterator<Item = &'a TraceRecord> + 'a {
        self.records.iter().filter(move |r| r.ev == ev)
    }

    pub fn count(&self, ev: &str) -> usize {
        self.events(ev).count()
    }

    pub fn write_jsonl<W: Write>(&self, mut out: W) -> io::Result<()> {
        for record in &self.records {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf)
            .expect("writing to a Vec cannot fail");
        buf
    }

    /// Hex SHA-256 of the JSONL encoding.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_jsonl());
        hex_string(&hasher.finalize())
    }
}

pub(crate) fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn jsonl_schema() {
        let mut trace = Trace::new();
        let dev = DeviceAddress::new(0x0000_0000_0102).unwrap();
        trace.record(SimTime::from_micros(5), "page", dev, json!({"target": "x"}));
        trace.record(SimTime::from_micros(9), "connected", dev, json!({}));
        let text = String::from_utf8(trace.to_jsonl()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            r#"{"t_us":5,"seq":0,"ev":"page","dev":"00:00:00:00:01:02","detail":{"target":"x"}}"#
        );
        let back: TraceRecord = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(back.seq, 1);
        assert_eq!(back.ev, "connected");
    }

    #[test]
    fn digest_is_stable() {
        let mut a = Trace::new();
        let mut b = Trace::new();
        let dev = DeviceAddress::new(1).unwrap();
        for t in [&mut a, &mut b] {
            t.record(SimTime::ZERO, "x", dev, json!({"k": 1}));
        }
        assert_eq!(a.digest(), b.digest());
        assert_eq!(a.digest().len(), 64);
    }
}
