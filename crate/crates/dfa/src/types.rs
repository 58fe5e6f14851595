//! Shared domain types and the 64-byte telemetry entry layout.
//!
//! All multi-byte integers are big-endian on the wire and inside the
//! collector memory region.

use std::fmt;
use std::net::Ipv4Addr;

use thiserror::Error;

/// Wire size of a five-tuple: 4+4+2+2+1 plus 4 reserved-zero bytes.
pub const FIVE_TUPLE_WIRE_LEN: usize = 17;

/// Size of one collector memory cell.
pub const ENTRY_LEN: usize = 64;

/// The entry checksum covers bytes `[0, 49)`: flow ID, packet count,
/// the six moment sums, and the five-tuple.
pub const ENTRY_CRC_COVERAGE: usize = 49;

/// Flow identity: source/destination IPv4 endpoints plus L4 protocol.
#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
pub struct FiveTuple {
    pub src_ip: Ipv4Addr,
    pub dst_ip: Ipv4Addr,
    pub src_port: u16,
    pub dst_port: u16,
    pub protocol: u8,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FiveTupleError {
    #[error("reserved five-tuple bytes must be zero")]
    ReservedNonZero,
}

impl FiveTuple {
    pub fn new(
        src_ip: Ipv4Addr,
        dst_ip: Ipv4Addr,
        src_port: u16,
        dst_port: u16,
        protocol: u8,
    ) -> Self {
        Self { src_ip, dst_ip, src_port, dst_port, protocol }
    }

    /// `src_ip(4) ‖ dst_ip(4) ‖ src_port(2) ‖ dst_port(2) ‖ protocol(1) ‖ reserved(4, zero)`
    pub fn encode(&self) -> [u8; FIVE_TUPLE_WIRE_LEN] {
        let mut b = [0u8; FIVE_TUPLE_WIRE_LEN];
        b[0..4].copy_from_slice(&self.src_ip.octets());
        b[4..8].copy_from_slice(&self.dst_ip.octets());
        b[8..10].copy_from_slice(&self.src_port.to_be_bytes());
        b[10..12].copy_from_slice(&self.dst_port.to_be_bytes());
        b[12] = self.protocol;
        // bytes 13..17 reserved, already zero
        b
    }

    /// Rejects nonzero reserved bytes.
    pub fn decode(b: &[u8; FIVE_TUPLE_WIRE_LEN]) -> Result<Self, FiveTupleError> {
        if b[13..17] != [0, 0, 0, 0] {
            return Err(FiveTupleError::ReservedNonZero);
        }
        Ok(Self {
            src_ip: Ipv4Addr::new(b[0], b[1], b[2], b[3]),
            dst_ip: Ipv4Addr::new(b[4], b[5], b[6], b[7]),
            src_port: u16::from_be_bytes([b[8], b[9]]),
            dst_port: u16::from_be_bytes([b[10], b[11]]),
            protocol: b[12],
        })
    }
}

impl fmt::Display for FiveTuple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{} -> {}:{} proto {}",
            self.src_ip, self.src_port, self.dst_ip, self.dst_port, self.protocol
        )
    }
}

/// Nanoseconds since the simulation epoch. Traces carry explicit
/// per-packet timestamps; nothing in the pipeline reads a wall clock.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Debug, Default)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub const fn from_nanos(ns: u64) -> Self {
        Self(ns)
    }

    pub const fn from_micros(us: u64) -> Self {
        Self(us * 1_000)
    }

    pub const fn from_millis(ms: u64) -> Self {
        Self(ms * 1_000_000)
    }

    pub const fn nanos(self) -> u64 {
        self.0
    }

    /// The 32-bit data-plane form: low 32 bits of the nanosecond count.
    pub const fn low32(self) -> u32 {
        self.0 as u32
    }
}

/// Inter-arrival time on the 32-bit data-plane clock: wrapping
/// subtraction of truncated timestamps.
pub fn iat32(now: Timestamp, last_ts32: u32) -> u32 {
    now.low32().wrapping_sub(last_ts32)
}

pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

pub const TCP_FIN: u8 = 0x01;
pub const TCP_SYN: u8 = 0x02;
pub const TCP_ACK: u8 = 0x10;

/// One packet observation as fed to a reporter pipeline: the flow key,
/// the wire size, the TCP flag byte (zero for non-TCP), and the
/// arrival timestamp.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PacketEvent {
    pub ts: Timestamp,
    pub five_tuple: FiveTuple,
    pub size_bytes: u32,
    pub tcp_flags: u8,
}

/// Per-flow data-plane registers: packet count, last-seen 32-bit
/// timestamp, and six moment sums maintained modulo 2^32.
///
/// `sum_iat[k-1]` holds Σ iat^k and `sum_ps[k-1]` holds Σ size^k for
/// k = 1..3, each addend produced by the configured power
/// approximation and accumulated with wrapping addition.
#[derive(Clone, Copy, PartialEq, Eq, Debug, Default)]
pub struct FeatureState {
    pub packet_count: u32,
    pub last_ts32: u32,
    pub sum_iat: [u32; 3],
    pub sum_ps: [u32; 3],
}

/// One 64-byte collector memory cell.
///
/// Layout (big-endian):
///
/// | offset | field        |
/// |--------|--------------|
/// | 0      | flow_id      |
/// | 4      | packet_count |
/// | 8      | sum_iat1     |
/// | 12     | sum_iat2     |
/// | 16     | sum_iat3     |
/// | 20     | sum_ps1      |
/// | 24     | sum_ps2      |
/// | 28     | sum_ps3      |
/// | 32..49 | five_tuple   |
/// | 49..53 | checksum     |
/// | 53..64 | padding (0)  |
///
/// The checksum is CRC-32 (IEEE 802.3 polynomial, reflected,
/// init 0xFFFFFFFF, final XOR 0xFFFFFFFF) over bytes `[0, 49)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct TelemetryEntry {
    pub flow_id: u32,
    pub packet_count: u32,
    pub sum_iat: [u32; 3],
    pub sum_ps: [u32; 3],
    pub five_tuple: FiveTuple,
}

/// Classification of a 64-byte cell image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecodedCell {
    /// All 64 bytes zero; the canonical unwritten state.
    Empty,
    /// Nonzero but fails checksum or layout validation.
    Corrupt,
    Entry(TelemetryEntry),
}

/// CRC-32 used for the entry checksum (and the frame ICRC in `wire`).
pub fn crc32(bytes: &[u8]) -> u32 {
    crc32fast::hash(bytes)
}

/// Serializes an entry into its 64-byte cell image, recomputing the
/// checksum field.
pub fn encode_entry(e: &TelemetryEntry) -> [u8; ENTRY_LEN] {
    let mut b = [0u8; ENTRY_LEN];
    b[0..4].copy_from_slice(&e.flow_id.to_be_bytes());
    b[4..8].copy_from_slice(&e.packet_count.to_be_bytes());
    for k in 0..3 {
        b[8 + 4 * k..12 + 4 * k].copy_from_slice(&e.sum_iat[k].to_be_bytes());
        b[20 + 4 * k..24 + 4 * k].copy_from_slice(&e.sum_ps[k].to_be_bytes());
    }
    b[32..49].copy_from_slice(&e.five_tuple.encode());
    let crc = crc32(&b[..ENTRY_CRC_COVERAGE]);
    b[49..53].copy_from_slice(&crc.to_be_bytes());
    // bytes 53..64 stay zero
    b
}

/// Classifies a 64-byte cell: all-zero is `Empty`, checksum or layout
/// mismatch is `Corrupt`, anything else parses.
///
/// Nonzero padding or nonzero five-tuple reserved bytes count as
/// corruption: a written entry always zeroes both, so their presence
/// means the cell was not produced by `encode_entry`.
pub fn decode_entry(b: &[u8; ENTRY_LEN]) -> DecodedCell {
    if b.iter().all(|&x| x == 0) {
        return DecodedCell::Empty;
    }
    let stored = u32::from_be_bytes([b[49], b[50], b[51], b[52]]);
    if stored != crc32(&b[..ENTRY_CRC_COVERAGE]) {
        return DecodedCell::Corrupt;
    }
    if b[53..64].iter().any(|&x| x != 0) {
        return DecodedCell::Corrupt;
    }
    let mut ft = [0u8; FIVE_TUPLE_WIRE_LEN];
    ft.copy_from_slice(&b[32..49]);
    let five_tuple = match FiveTuple::decode(&ft) {
        Ok(ft) => ft,
        Err(_) => return DecodedCell::Corrupt,
    };
    let word = |off: usize| u32::from_be_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]]);
    DecodedCell::Entry(TelemetryEntry {
        flow_id: word(0),
        packet_count: word(4),
        sum_iat: [word(8), word(12), word(16)],
        sum_ps: [word(20), word(24), word(28)],
        five_tuple,
    })
}
