//! Flow-level packet signatures and device fingerprints.
//!
//! A signature aggregates every packet sharing the same protocol, endpoint,
//! service port and direction. Time, payload and device identity never enter
//! the digest, so identical device models produce identical signatures on
//! every sentinel.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{sha256, DeviceFingerprint, PacketSignature};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SigError {
    #[error("endpoint is empty")]
    EmptyEndpoint,
    #[error("endpoint {0:?} contains the '|' separator")]
    SeparatorInEndpoint(String),
    #[error("timestamp {0} is negative or not finite")]
    InvalidTimestamp(f64),
    #[error("cannot fingerprint silent device")]
    SilentDevice,
}

/// IP payload protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Protocol {
    Tcp,
    Udp,
    Icmp,
    Other(u8),
}

impl Protocol {
    /// Maps IANA protocol numbers onto the named variants.
    pub fn from_number(n: u8) -> Protocol {
        match n {
            1 => Protocol::Icmp,
            6 => Protocol::Tcp,
            17 => Protocol::Udp,
            other => Protocol::Other(other),
        }
    }

    pub fn canonical(&self) -> String {
        match self {
            Protocol::Tcp => "TCP".into(),
            Protocol::Udp => "UDP".into(),
            Protocol::Icmp => "ICMP".into(),
            Protocol::Other(code) => format!("OTHER{code}"),
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        match upper.as_str() {
            "TCP" => Ok(Protocol::Tcp),
            "UDP" => Ok(Protocol::Udp),
            "ICMP" => Ok(Protocol::Icmp),
            _ => {
                let code = upper.strip_prefix("OTHER").unwrap_or(&upper);
                code.parse::<u8>()
                    .map(Protocol::from_number)
                    .map_err(|_| format!("unknown protocol {s:?}"))
            }
        }
    }
}

impl Serialize for Protocol {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Protocol::Other(code) => s.serialize_u8(*code),
            named => s.serialize_str(&named.canonical()),
        }
    }
}

impl<'de> Deserialize<'de> for Protocol {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u8),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(n) => Ok(Protocol::from_number(n)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Whether the service port is hosted by the device (`L`) or by the remote
/// endpoint (`R`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "L")]
    Local,
    #[serde(rename = "R")]
    Remote,
}

impl Direction {
    pub fn tag(&self) -> char {
        match self {
            Direction::Local => 'L',
            Direction::Remote => 'R',
        }
    }
}

/// One observed packet or flow event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PacketRecord {
    #[serde(default)]
    pub timestamp: f64,
    pub protocol: Protocol,
    /// DNS name when resolved, otherwise the IP literal.
    pub endpoint: String,
    /// Portless protocols such as ICMP carry 0.
    pub service_port: u16,
    pub direction: Direction,
    /// Simulator-local handle, never hashed.
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub device_id: String,
}

impl PacketRecord {
    /// A flow template with no time or device attached.
    pub fn flow(protocol: Protocol, endpoint: &str, service_port: u16, direction: Direction) -> Self {
        PacketRecord {
            timestamp: 0.0,
            protocol,
            endpoint: endpoint.to_string(),
            service_port,
            direction,
            device_id: String::new(),
        }
    }

    pub fn validate(&self) -> Result<(), SigError> {
        if !self.timestamp.is_finite() || self.timestamp < 0.0 {
            return Err(SigError::InvalidTimestamp(self.timestamp));
        }
        if self.endpoint.is_empty() {
            return Err(SigError::EmptyEndpoint);
        }
        if self.endpoint.contains('|') {
            return Err(SigError::SeparatorInEndpoint(self.endpoint.clone()));
        }
        Ok(())
    }

    /// The (protocol, endpoint, port, direction) key after normalization.
    pub fn flow_key(&self) -> (Protocol, String, u16, Direction) {
        (self.protocol, self.endpoint.to_lowercase(), self.service_port, self.direction)
    }
}

/// `<PROTOCOL>|<endpoint>|<direction><port>`, endpoint lowercased.
pub fn canonical_signature_string(record: &PacketRecord) -> Result<String, SigError> {
    record.validate()?;
    Ok(format!(
        "{}|{}|{}{}",
        record.protocol.canonical(),
        record.endpoint.to_lowercase(),
        record.direction.tag(),
        record.service_port
    ))
}

pub fn compute_signature(record: &PacketRecord) -> Result<PacketSignature, SigError> {
    let canonical = canonical_signature_string(record)?;
    Ok(PacketSignature(sha256(canonical.as_bytes())))
}

/// SHA-256 over the ascending concatenation of the distinct signature digests.
pub fn compute_fingerprint<'a, I>(signatures: I) -> Result<DeviceFingerprint, SigError>
where
    I: IntoIterator<Item = &'a PacketSignature>,
{
    let sorted: BTreeSet<&PacketSignature> = signatures.into_iter().collect();
    if sorted.is_empty() {
        return Err(SigError::SilentDevice);
    }
    let mut buf = Vec::with_capacity(sorted.len() * 32);
    for sig in sorted {
        buf.extend_from_slice(sig.as_bytes());
    }
    Ok(DeviceFingerprint(sha256(&buf)))
}
