//! Block formats and their canonical byte encoding.
//!
//! Encoding is fixed field order, big-endian integers and u32 length prefixes
//! on sequences, preceded by a one-byte kind tag. Every header hash and every
//! size measurement in the crate is taken over these bytes.

use serde::{Deserialize, Serialize};

use crate::digest::{sha256, BlockHash, ChainId, PacketSignature, SentinelAddress};
use crate::time::SimTime;

const WHITELIST_TAG: u8 = 0x01;
const CONTROL_TAG: u8 = 0x02;

/// Encoded size of a whitelist block with no signatures.
pub const WHITELIST_BASE_LEN: usize = 1 + 32 + 32 + 32 + 8 + 4;
/// Encoded size of a control block listing no headers.
pub const CONTROL_BASE_LEN: usize = 1 + 32 + 8 + 32 + 4 + 8 + 32;

/// 256-bit proof-of-work threshold stored big-endian; a hash meets the target
/// when it is numerically smaller.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Target(pub [u8; 32]);

impl Target {
    /// 2^256 - 1: every hash except all-ones meets it.
    pub const MAX: Target = Target([0xff; 32]);
    pub const ZERO: Target = Target([0u8; 32]);

    /// 2^bits. `bits` must be below 256.
    pub fn pow2(bits: u32) -> Target {
        assert!(bits < 256, "target 2^{bits} does not fit in 256 bits");
        let mut t = [0u8; 32];
        let byte = 31 - (bits / 8) as usize;
        t[byte] = 1u8 << (bits % 8);
        Target(t)
    }

    pub fn is_met_by(&self, hash: &BlockHash) -> bool {
        hash.0 < self.0
    }

    /// Approximate numeric value, sufficient for rate ratios.
    pub fn to_f64(&self) -> f64 {
        self.0.iter().fold(0.0, |acc, &b| acc * 256.0 + b as f64)
    }

    /// Expected hashes per hit, `2^256 / target`.
    pub fn expected_attempts(&self) -> f64 {
        2f64.powi(256) / self.to_f64()
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl std::fmt::Debug for Target {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Target(0x{})", self.to_hex())
    }
}

impl Serialize for Target {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for Target {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let mut out = [0u8; 32];
        hex::decode_to_slice(&s, &mut out).map_err(serde::de::Error::custom)?;
        Ok(Target(out))
    }
}

/// One block of a device chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WhitelistBlock {
    /// Zero for the genesis block of a device chain.
    pub prev_hash: BlockHash,
    pub chain_id: ChainId,
    pub sentinel_address: SentinelAddress,
    pub timestamp: SimTime,
    pub signatures: Vec<PacketSignature>,
}

impl WhitelistBlock {
    /// Deterministic genesis for a device chain: any sentinel profiling the
    /// same signature set builds the same block.
    pub fn genesis(chain_id: ChainId, profiled: impl IntoIterator<Item = PacketSignature>) -> Self {
        let mut signatures: Vec<_> = profiled.into_iter().collect();
        signatures.sort();
        signatures.dedup();
        WhitelistBlock {
            prev_hash: BlockHash::ZERO,
            chain_id,
            sentinel_address: SentinelAddress::ZERO,
            timestamp: SimTime::ZERO,
            signatures,
        }
    }

    pub fn is_genesis(&self) -> bool {
        self.prev_hash == BlockHash::ZERO
    }

    pub fn has_duplicates(&self) -> bool {
        let mut seen = std::collections::HashSet::with_capacity(self.signatures.len());
        !self.signatures.iter().all(|s| seen.insert(*s))
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.push(WHITELIST_TAG);
        buf.extend_from_slice(self.prev_hash.as_bytes());
        buf.extend_from_slice(self.chain_id.as_bytes());
        buf.extend_from_slice(self.sentinel_address.as_bytes());
        buf.extend_from_slice(&self.timestamp.as_micros().to_be_bytes());
        buf.extend_from_slice(&(self.signatures.len() as u32).to_be_bytes());
        for sig in &self.signatures {
            buf.extend_from_slice(sig.as_bytes());
        }
        buf
    }

    pub fn encoded_len(&self) -> usize {
        WHITELIST_BASE_LEN + 32 * self.signatures.len()
    }
}

/// Hash of the whitelist block's canonical encoding; what control blocks list.
pub fn header_hash(block: &WhitelistBlock) -> BlockHash {
    BlockHash(sha256(&block.encode()))
}

/// One block of the proof-of-work control chain.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ControlBlock {
    pub prev_hash: BlockHash,
    pub timestamp: SimTime,
    pub sentinel_address: SentinelAddress,
    pub whitelist_headers: Vec<BlockHash>,
    pub nonce: u64,
    pub target: Target,
}

impl ControlBlock {
    /// The fixed root every sentinel starts from.
    pub fn genesis() -> Self {
        ControlBlock {
            prev_hash: BlockHash::ZERO,
            timestamp: SimTime::ZERO,
            sentinel_address: SentinelAddress::ZERO,
            whitelist_headers: Vec::new(),
            nonce: 0,
            target: Target::MAX,
        }
    }

    pub fn is_genesis(&self) -> bool {
        *self == Self::genesis()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.encoded_len());
        buf.push(CONTROL_TAG);
        buf.extend_from_slice(self.prev_hash.as_bytes());
        buf.extend_from_slice(&self.timestamp.as_micros().to_be_bytes());
        buf.extend_from_slice(self.sentinel_address.as_bytes());
        buf.extend_from_slice(&(self.whitelist_headers.len() as u32).to_be_bytes());
        for h in &self.whitelist_headers {
            buf.extend_from_slice(h.as_bytes());
        }
        buf.extend_from_slice(&self.nonce.to_be_bytes());
        buf.extend_from_slice(&self.target.0);
        buf
    }

    /// Byte offset of the nonce inside [`ControlBlock::encode`].
    pub fn nonce_offset(&self) -> usize {
        1 + 32 + 8 + 32 + 4 + 32 * self.whitelist_headers.len()
    }

    pub fn encoded_len(&self) -> usize {
        CONTROL_BASE_LEN + 32 * self.whitelist_headers.len()
    }

    pub fn hash(&self) -> BlockHash {
        control_hash(self)
    }
}

pub fn control_hash(block: &ControlBlock) -> BlockHash {
    BlockHash(sha256(&block.encode()))
}

impl WhitelistBlock {
    pub fn hash(&self) -> BlockHash {
        header_hash(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sigcore::{compute_fingerprint, compute_signature, Direction, PacketRecord, Protocol};

    // Frozen with Python's hashlib over the byte layout documented above.
    const LIFX_GENESIS_HASH: &str = "55d09af4633ac31399d517192f0b833127dd63c465310ee992af536cec41f860";
    const CONTROL_GENESIS_HASH: &str = "fd08621215c66819aef42406004e23802008a492f4e3c2497b2fc7d44ae46b49";

    fn lifx_sigs() -> Vec<PacketSignature> {
        vec![
            compute_signature(&PacketRecord::flow(Protocol::Udp, "time1.google.com", 123, Direction::Remote)).unwrap(),
            compute_signature(&PacketRecord::flow(Protocol::Tcp, "104.198.46.246", 56700, Direction::Remote)).unwrap(),
        ]
    }

    #[test]
    fn golden_genesis_hashes() {
        let sigs = lifx_sigs();
        let fp = compute_fingerprint(&sigs).unwrap();
        let genesis = WhitelistBlock::genesis(fp, sigs);
        assert_eq!(genesis.encode().len(), 173);
        assert_eq!(header_hash(&genesis).to_hex(), LIFX_GENESIS_HASH);
        assert_eq!(header_hash(&genesis), header_hash(&genesis.clone()));

        let control = ControlBlock::genesis();
        assert_eq!(control.encode().len(), CONTROL_BASE_LEN);
        assert_eq!(control_hash(&control).to_hex(), CONTROL_GENESIS_HASH);
    }

    #[test]
    fn one_byte_changes_the_hash() {
        let sigs = lifx_sigs();
        let fp = compute_fingerprint(&sigs).unwrap();
        let block = WhitelistBlock::genesis(fp, sigs);
        let mut tampered = block.clone();
        tampered.signatures[0].0[7] ^= 1;
        assert_ne!(header_hash(&block), header_hash(&tampered));
    }

    #[test]
    fn sizes() {
        let mut c = ControlBlock::genesis();
        for n in 0..5 {
            assert_eq!(c.encode().len(), CONTROL_BASE_LEN + 32 * n);
            assert_eq!(c.encoded_len(), c.encode().len());
            c.whitelist_headers.push(BlockHash([n as u8; 32]));
        }
        let nonce_at = c.nonce_offset();
        c.nonce = 0x0102030405060708;
        assert_eq!(&c.encode()[nonce_at..nonce_at + 8], &[1, 2, 3, 4, 5, 6, 7, 8]);
        let empty = WhitelistBlock::genesis(ChainId::ZERO, []);
        assert_eq!(empty.encode().len(), WHITELIST_BASE_LEN);
    }

    #[test]
    fn targets() {
        assert!(Target::MAX.is_met_by(&BlockHash([0xfe; 32])));
        assert!(!Target::ZERO.is_met_by(&BlockHash::ZERO));
        let t = Target::pow2(240);
        assert!(t.is_met_by(&BlockHash([0; 32])));
        let mut above = [0u8; 32];
        above[1] = 0xff;
        assert!(!t.is_met_by(&BlockHash(above)));
        let mut equal = [0u8; 32];
        equal[1] = 1;
        assert!(!t.is_met_by(&BlockHash(equal)));
        assert!((t.expected_attempts() - 65536.0).abs() < 1e-6);
        assert!((Target::pow2(255).to_f64() / Target::pow2(251).to_f64() - 16.0).abs() < 1e-9);
    }
}
