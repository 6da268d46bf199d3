//! Device identity: 48-bit addresses and user-facing names.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

/// Largest representable address, `FF:FF:FF:FF:FF:FF`.
pub const MAX_ADDRESS: u64 = (1 << 48) - 1;

/// Maximum length of a device name in bytes.
pub const MAX_NAME_LEN: usize = 248;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AddressError {
    #[error("malformed address {text:?}: {reason}")]
    MalformedAddress { text: String, reason: &'static str },
    #[error("address value {0:#x} does not fit in 48 bits")]
    OutOfRange(u64),
    #[error("device name is {0} bytes, limit is 248")]
    NameTooLong(usize),
}

/// A 48-bit device address, unique within one simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct DeviceAddress(u64);

impl DeviceAddress {
    pub fn new(value: u64) -> Result<Self, AddressError> {
        if value > MAX_ADDRESS {
            return Err(AddressError::OutOfRange(value));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> u64 {
        self.0
    }

    /// Big-endian octets, most significant first (the order of the text form).
    pub fn octets(self) -> [u8; 6] {
        let b = self.0.to_be_bytes();
        [b[2], b[3], b[4], b[5], b[6], b[7]]
    }
}

/// Parses the colon-separated hex form. Hex digits may be either case.
pub fn parse_address(text: &str) -> Result<DeviceAddress, AddressError> {
    let malformed = |reason| AddressError::MalformedAddress {
        text: text.to_string(),
        reason,
    };
    if text.len() != 17 {
        return Err(malformed("expected 17 characters"));
    }
    let mut value = 0u64;
    let mut groups = 0;
    for (i, group) in text.split(':').enumerate() {
        if group.len() != 2 {
            return Err(malformed("expected six colon-separated octet pairs"));
        }
        if !group.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(malformed("non-hex digit"));
        }
        // Both characters were checked as hex digits above.
        let octet = u8::from_str_radix(group, 16).map_err(|_| malformed("non-hex digit"))?;
        value = (value << 8) | u64::from(octet);
        groups = i + 1;
    }
    if groups != 6 {
        return Err(malformed("expected six colon-separated octet pairs"));
    }
    Ok(DeviceAddress(value))
}

/// Canonical uppercase colon-hex text form.
pub fn format_address(addr: DeviceAddress) -> String {
    let o = addr.octets();
    format!(
        "{:02X}:{:02X}:{:02X}:{:02X}:{:02X}:{:02X}",
        o[0], o[1], o[2], o[3], o[4], o[5]
    )
}

impl fmt::Display for DeviceAddress {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&format_address(*self))
    }
}

impl FromStr for DeviceAddress {
    type Err = AddressError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        parse_address(s)
    }
}

impl Serialize for DeviceAddress {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&format_address(*self))
    }
}

impl<'de> Deserialize<'de> for DeviceAddress {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        parse_address(&text).map_err(serde::de::Error::custom)
    }
}

/// User-level alias for a device. Names need not be unique.
#[derive(Debug, Clone, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct DeviceName(String);

impl DeviceName {
    pub fn new(text: impl Into<String>) -> Result<Self, AddressError> {
        let text = text.into();
        if text.len() > MAX_NAME_LEN {
            return Err(AddressError::NameTooLong(text.len()));
        }
        Ok(Self(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// Decodes a name received over the air. Invalid UTF-8 is replaced and
    /// overlong input truncated on a character boundary.
    pub fn from_wire(bytes: &[u8]) -> Self {
        let mut text = String::from_utf8_lossy(bytes).into_owned();
        while text.len() > MAX_NAME_LEN {
            text.pop();
        }
        Self(text)
    }
}

impl fmt::Display for DeviceName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for DeviceName {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let text = String::deserialize(deserializer)?;
        DeviceName::new(text).map_err(serde::de::Error::custom)
    }
}
