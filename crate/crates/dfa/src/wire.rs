//! Bit-exact codecs for the two telemetry packet formats.
//!
//! Reporter → Translator: a UDP frame carrying an 8-byte base header
//! (version, flags, reporter ID, flow ID) and the 45-byte feature
//! vector. Translator → Collector: a RoCEv2 WRITE-Only frame (BTH +
//! RETH + payload + ICRC) targeting one 64-byte collector cell.
//!
//! Everything is big-endian. Decoders classify malformed input and
//! never read past the buffer.

use std::net::Ipv4Addr;

use thiserror::Error;

use crate::types::{crc32, FiveTuple, FIVE_TUPLE_WIRE_LEN};

pub const ETH_LEN: usize = 14;
pub const IPV4_LEN: usize = 20;
pub const UDP_LEN: usize = 8;
pub const BTH_LEN: usize = 12;
pub const RETH_LEN: usize = 16;
pub const ICRC_LEN: usize = 4;
pub const DTA_BASE_LEN: usize = 8;
/// packet_count(4) + six sums(24) + five-tuple(17).
pub const DFA_VECTOR_LEN: usize = 45;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const IPPROTO_UDP: u8 = 17;

/// UDP destination port identifying telemetry report frames.
pub const DTA_UDP_PORT: u16 = 40050;
/// Standard RoCEv2 UDP destination port.
pub const ROCEV2_UDP_PORT: u16 = 4791;
/// BTH opcode for the UC WRITE-Only verb.
pub const OPCODE_WRITE_ONLY: u8 = 0x2A;

/// Base-header flag marking a feature report; all other bits reserved.
pub const FLAG_FEATURE_REPORT: u8 = 0x01;
pub const DTA_VERSION: u8 = 1;

/// Full DTA frame: eth + ipv4 + udp + base + vector.
pub const DTA_FRAME_LEN: usize = ETH_LEN + IPV4_LEN + UDP_LEN + DTA_BASE_LEN + DFA_VECTOR_LEN;

/// RoCEv2 frame length for a given payload size.
pub const fn rocev2_frame_len(payload: usize) -> usize {
    ETH_LEN + IPV4_LEN + UDP_LEN + BTH_LEN + RETH_LEN + payload + ICRC_LEN
}

/// Payload sizes the WRITE-Only encoder accepts (the bench sweep set).
pub const ROCEV2_PAYLOAD_SIZES: [usize; 5] = [8, 16, 32, 64, 128];

/// Link-layer and IP addressing used when synthesizing frames.
#[derive(Clone, Debug)]
pub struct NetConfig {
    pub reporter_mac: [u8; 6],
    pub translator_mac: [u8; 6],
    pub collector_mac: [u8; 6],
    pub reporter_ip: Ipv4Addr,
    pub translator_ip: Ipv4Addr,
    pub collector_ip: Ipv4Addr,
    /// UDP source port on report frames.
    pub dta_src_port: u16,
    /// UDP source port on RoCEv2 frames.
    pub roce_src_port: u16,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            reporter_mac: [0x02, 0, 0, 0, 0, 0x01],
            translator_mac: [0x02, 0, 0, 0, 0, 0x02],
            collector_mac: [0x02, 0, 0, 0, 0, 0x03],
            reporter_ip: Ipv4Addr::new(10, 0, 1, 1),
            translator_ip: Ipv4Addr::new(10, 0, 1, 2),
            collector_ip: Ipv4Addr::new(10, 0, 1, 3),
            dta_src_port: 51000,
            roce_src_port: 49152,
        }
    }
}

/// One feature report as carried between Reporter and Translator.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct DtaReport {
    pub flags: u8,
    pub reporter_id: u16,
    pub flow_id: u32,
    pub packet_count: u32,
    pub sum_iat: [u32; 3],
    pub sum_ps: [u32; 3],
    pub five_tuple: FiveTuple,
}

impl DtaReport {
    pub fn new(
        reporter_id: u16,
        flow_id: u32,
        packet_count: u32,
        sum_iat: [u32; 3],
        sum_ps: [u32; 3],
        five_tuple: FiveTuple,
    ) -> Self {
        Self {
            flags: FLAG_FEATURE_REPORT,
            reporter_id,
            flow_id,
            packet_count,
            sum_iat,
            sum_ps,
            five_tuple,
        }
    }

    /// The 45-byte feature vector: counts and sums followed by the
    /// five-tuple.
    pub fn feature_vector(&self) -> [u8; DFA_VECTOR_LEN] {
        let mut v = [0u8; DFA_VECTOR_LEN];
        v[0..4].copy_from_slice(&self.packet_count.to_be_bytes());
        for k in 0..3 {
            v[4 + 4 * k..8 + 4 * k].copy_from_slice(&self.sum_iat[k].to_be_bytes());
            v[16 + 4 * k..20 + 4 * k].copy_from_slice(&self.sum_ps[k].to_be_bytes());
        }
        v[28..45].copy_from_slice(&self.five_tuple.encode());
        v
    }
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum DtaError {
    /// Not identifiable as a telemetry report; pass through as normal
    /// traffic.
    #[error("not a telemetry report frame")]
    NotDta,
    #[error("bad frame length")]
    BadLength,
    #[error("bad version byte")]
    BadMagic,
    #[error("flags invalid or reserved bits set")]
    BadFlags,
    #[error("IPv4 or UDP checksum mismatch")]
    BadChecksum,
    #[error("five-tuple reserved bytes nonzero")]
    BadFiveTuple,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum RoceError {
    /// Not identifiable as RoCEv2; pass through as normal traffic.
    #[error("not a RoCEv2 frame")]
    NotRoce,
    #[error("bad frame length")]
    BadLength,
    #[error("unsupported BTH opcode")]
    BadOpcode,
    #[error("IPv4 checksum mismatch")]
    BadChecksum,
    #[error("ICRC mismatch")]
    BadIcrc,
}

#[derive(Clone, Debug, Error, PartialEq, Eq)]
pub enum EncodeError {
    #[error("reserved flag bits set: {0:#04x}")]
    ReservedFlags(u8),
    #[error("unsupported payload length {0}")]
    UnsupportedPayloadLen(usize),
    #[error("{0} exceeds its field width")]
    FieldOverflow(&'static str),
}

fn put_u16(b: &mut [u8], off: usize, v: u16) {
    b[off..off + 2].copy_from_slice(&v.to_be_bytes());
}

fn put_u32(b: &mut [u8], off: usize, v: u32) {
    b[off..off + 4].copy_from_slice(&v.to_be_bytes());
}

fn get_u16(b: &[u8], off: usize) -> u16 {
    u16::from_be_bytes([b[off], b[off + 1]])
}

fn get_u32(b: &[u8], off: usize) -> u32 {
    u32::from_be_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn get_u24(b: &[u8], off: usize) -> u32 {
    u32::from_be_bytes([0, b[off], b[off + 1], b[off + 2]])
}

/// One's-complement sum used by the IPv4 header and UDP checksums.
fn inet_checksum(chunks: &[&[u8]]) -> u16 {
    let mut sum = 0u32;
    for chunk in chunks {
        let mut it = chunk.chunks_exact(2);
        for w in &mut it {
            sum += u16::from_be_bytes([w[0], w[1]]) as u32;
        }
        if let [last] = it.remainder() {
            sum += (*last as u32) << 8;
        }
    }
    while sum > 0xFFFF {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    !(sum as u16)
}

fn write_eth(b: &mut [u8], dst: [u8; 6], src: [u8; 6]) {
    b[0..6].copy_from_slice(&dst);
    b[6..12].copy_from_slice(&src);
    put_u16(b, 12, ETHERTYPE_IPV4);
}

/// Writes the 20-byte IPv4 header at offset 14; total length covers
/// the header plus `payload_len`. IHL fixed at 5, DF set.
fn write_ipv4(b: &mut [u8], src: Ipv4Addr, dst: Ipv4Addr, payload_len: usize) {
    let o = ETH_LEN;
    b[o] = 0x45;
    b[o + 1] = 0; // TOS
    put_u16(b, o + 2, (IPV4_LEN + payload_len) as u16);
    put_u16(b, o + 4, 0); // identification
    put_u16(b, o + 6, 0x4000); // DF
    b[o + 8] = 64; // TTL
    b[o + 9] = IPPROTO_UDP;
    put_u16(b, o + 10, 0); // checksum placeholder
    b[o + 12..o + 16].copy_from_slice(&src.octets());
    b[o + 16..o + 20].copy_from_slice(&dst.octets());
    let cksum = inet_checksum(&[&b[o..o + IPV4_LEN]]);
    put_u16(b, o + 10, cksum);
}

fn udp_pseudo_header(b: &[u8], udp_len: u16) -> [u8; 12] {
    let mut p = [0u8; 12];
    p[0..8].copy_from_slice(&b[ETH_LEN + 12..ETH_LEN + 20]);
    p[9] = IPPROTO_UDP;
    p[10..12].copy_from_slice(&udp_len.to_be_bytes());
    p
}

/// Writes the UDP header at offset 34. With `checksum` the real UDP
/// checksum is computed over the pseudo-header and datagram (0 sums
/// transmit as 0xFFFF); without it the field stays zero, the RoCEv2
/// convention where the ICRC carries integrity.
fn write_udp(b: &mut [u8], src_port: u16, dst_port: u16, udp_len: u16, checksum: bool) {
    let o = ETH_LEN + IPV4_LEN;
    put_u16(b, o, src_port);
    put_u16(b, o + 2, dst_port);
    put_u16(b, o + 4, udp_len);
    put_u16(b, o + 6, 0);
    if checksum {
        let pseudo = udp_pseudo_header(b, udp_len);
        let ck = inet_checksum(&[&pseudo, &b[o..o + udp_len as usize]]);
        put_u16(b, o + 6, if ck == 0 { 0xFFFF } else { ck });
    }
}

fn verify_ipv4(b: &[u8]) -> bool {
    inet_checksum(&[&b[ETH_LEN..ETH_LEN + IPV4_LEN]]) == 0
}

fn verify_udp(b: &[u8]) -> bool {
    let o = ETH_LEN + IPV4_LEN;
    let udp_len = get_u16(b, o + 4);
    if get_u16(b, o + 6) == 0 {
        return true; // checksum not in use
    }
    let pseudo = udp_pseudo_header(b, udp_len);
    inet_checksum(&[&pseudo, &b[o..o + udp_len as usize]]) == 0
}

/// True when the frame carries UDP/IPv4 to the given destination port.
fn is_udp_to(bytes: &[u8], port: u16) -> bool {
    bytes.len() >= ETH_LEN + IPV4_LEN + UDP_LEN
        && get_u16(bytes, 12) == ETHERTYPE_IPV4
        && bytes[ETH_LEN] == 0x45
        && bytes[ETH_LEN + 9] == IPPROTO_UDP
        && get_u16(bytes, ETH_LEN + IPV4_LEN + 2) == port
}

/// Encodes a feature report into its 95-byte frame. IPv4 and UDP
/// checksums are computed; reserved flag bits are rejected.
pub fn dta_encode(report: &DtaReport, net: &NetConfig) -> Result<Vec<u8>, EncodeError> {
    if report.flags != FLAG_FEATURE_REPORT {
        return Err(EncodeError::ReservedFlags(report.flags));
    }
    let mut b = vec![0u8; DTA_FRAME_LEN];
    write_eth(&mut b, net.translator_mac, net.reporter_mac);
    let udp_payload = DTA_BASE_LEN + DFA_VECTOR_LEN;
    write_ipv4(&mut b, net.reporter_ip, net.translator_ip, UDP_LEN + udp_payload);
    let o = ETH_LEN + IPV4_LEN + UDP_LEN;
    b[o] = DTA_VERSION;
    b[o + 1] = report.flags;
    put_u16(&mut b, o + 2, report.reporter_id);
    put_u32(&mut b, o + 4, report.flow_id);
    b[o + 8..o + 8 + DFA_VECTOR_LEN].copy_from_slice(&report.feature_vector());
    write_udp(
        &mut b,
        net.dta_src_port,
        DTA_UDP_PORT,
        (UDP_LEN + udp_payload) as u16,
        true,
    );
    Ok(b)
}

/// Parses a telemetry report frame. Frames that are not UDP/IPv4 to
/// the telemetry port classify as `NotDta` so callers can pass them
/// through as ordinary traffic.
pub fn dta_decode(bytes: &[u8]) -> Result<DtaReport, DtaError> {
    if !is_udp_to(bytes, DTA_UDP_PORT) {
        return Err(DtaError::NotDta);
    }
    if bytes.len() != DTA_FRAME_LEN
        || get_u16(bytes, ETH_LEN + 2) as usize != DTA_FRAME_LEN - ETH_LEN
        || get_u16(bytes, ETH_LEN + IPV4_LEN + 4) as usize != DTA_FRAME_LEN - ETH_LEN - IPV4_LEN
    {
        return Err(DtaError::BadLength);
    }
    if !verify_ipv4(bytes) || !verify_udp(bytes) {
        return Err(DtaError::BadChecksum);
    }
    let o = ETH_LEN + IPV4_LEN + UDP_LEN;
    if bytes[o] != DTA_VERSION {
        return Err(DtaError::BadMagic);
    }
    let flags = bytes[o + 1];
    if flags != FLAG_FEATURE_REPORT {
        return Err(DtaError::BadFlags);
    }
    let v = o + DTA_BASE_LEN;
    let mut ft = [0u8; FIVE_TUPLE_WIRE_LEN];
    ft.copy_from_slice(&bytes[v + 28..v + 45]);
    let five_tuple = FiveTuple::decode(&ft).map_err(|_| DtaError::BadFiveTuple)?;
    Ok(DtaReport {
        flags,
        reporter_id: get_u16(bytes, o + 2),
        flow_id: get_u32(bytes, o + 4),
        packet_count: get_u32(bytes, v),
        sum_iat: [get_u32(bytes, v + 4), get_u32(bytes, v + 8), get_u32(bytes, v + 12)],
        sum_ps: [get_u32(bytes, v + 16), get_u32(bytes, v + 20), get_u32(bytes, v + 24)],
        five_tuple,
    })
}

/// A decoded WRITE-Only frame.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct RoceWrite {
    pub dest_qp: u32,
    pub psn: u32,
    pub virtual_addr: u64,
    pub rkey: u32,
    pub payload: Vec<u8>,
}

/// Computes the frame ICRC: CRC-32 over the IPv4 header through the
/// payload with the invariant fields (IP TOS, TTL, header checksum,
/// and the two BTH reserved bytes) replaced by 0xFF. The Ethernet
/// header and the ICRC field itself are excluded. No hardware interop
/// is claimed for this masking.
pub fn icrc(frame_without_icrc: &[u8]) -> u32 {
    let mut masked = frame_without_icrc[ETH_LEN..].to_vec();
    masked[1] = 0xFF; // TOS
    masked[8] = 0xFF; // TTL
    masked[10] = 0xFF; // header checksum
    masked[11] = 0xFF;
    let bth = IPV4_LEN + UDP_LEN;
    masked[bth + 4] = 0xFF; // BTH reserved
    masked[bth + 8] = 0xFF; // BTH ack-request/reserved
    crc32(&masked)
}

/// Encodes a WRITE-Only frame carrying `payload` to `[addr, addr+len)`
/// on the target queue pair. Payload length must be one of
/// [`ROCEV2_PAYLOAD_SIZES`]; `dest_qp` and `psn` must fit 24 bits.
pub fn rocev2_encode_write_only(
    addr: u64,
    rkey: u32,
    dest_qp: u32,
    psn: u32,
    payload: &[u8],
    net: &NetConfig,
) -> Result<Vec<u8>, EncodeError> {
    if !ROCEV2_PAYLOAD_SIZES.contains(&payload.len()) {
        return Err(EncodeError::UnsupportedPayloadLen(payload.len()));
    }
    if dest_qp > 0xFF_FFFF {
        return Err(EncodeError::FieldOverflow("dest_qp"));
    }
    if psn > 0xFF_FFFF {
        return Err(EncodeError::FieldOverflow("psn"));
    }
    let mut b = vec![0u8; rocev2_frame_len(payload.len())];
    write_eth(&mut b, net.collector_mac, net.translator_mac);
    let udp_payload = BTH_LEN + RETH_LEN + payload.len() + ICRC_LEN;
    write_ipv4(&mut b, net.translator_ip, net.collector_ip, UDP_LEN + udp_payload);
    write_udp(&mut b, net.roce_src_port, ROCEV2_UDP_PORT, (UDP_LEN + udp_payload) as u16, false);
    let o = ETH_LEN + IPV4_LEN + UDP_LEN;
    b[o] = OPCODE_WRITE_ONLY;
    b[o + 1] = 0; // se/m/pad/tver
    put_u16(&mut b, o + 2, 0xFFFF); // default pkey
    b[o + 4] = 0; // reserved
    b[o + 5..o + 8].copy_from_slice(&dest_qp.to_be_bytes()[1..]);
    b[o + 8] = 0; // ack request / reserved
    b[o + 9..o + 12].copy_from_slice(&psn.to_be_bytes()[1..]);
    let r = o + BTH_LEN;
    b[r..r + 8].copy_from_slice(&addr.to_be_bytes());
    put_u32(&mut b, r + 8, rkey);
    put_u32(&mut b, r + 12, payload.len() as u32);
    let p = r + RETH_LEN;
    b[p..p + payload.len()].copy_from_slice(payload);
    let crc = icrc(&b[..p + payload.len()]);
    let end = b.len();
    put_u32(&mut b, end - ICRC_LEN, crc);
    Ok(b)
}

/// Parses a WRITE-Only frame. `verify_icrc` can be disabled for speed.
pub fn rocev2_decode(bytes: &[u8], verify_icrc: bool) -> Result<RoceWrite, RoceError> {
    if !is_udp_to(bytes, ROCEV2_UDP_PORT) {
        return Err(RoceError::NotRoce);
    }
    let min_len = rocev2_frame_len(0);
    if bytes.len() < min_len {
        return Err(RoceError::BadLength);
    }
    let payload_len = bytes.len() - min_len;
    if !ROCEV2_PAYLOAD_SIZES.contains(&payload_len)
        || get_u16(bytes, ETH_LEN + 2) as usize != bytes.len() - ETH_LEN
        || get_u16(bytes, ETH_LEN + IPV4_LEN + 4) as usize != bytes.len() - ETH_LEN - IPV4_LEN
    {
        return Err(RoceError::BadLength);
    }
    if !verify_ipv4(bytes) {
        return Err(RoceError::BadChecksum);
    }
    let o = ETH_LEN + IPV4_LEN + UDP_LEN;
    if bytes[o] != OPCODE_WRITE_ONLY {
        return Err(RoceError::BadOpcode);
    }
    let r = o + BTH_LEN;
    let dma_len = get_u32(bytes, r + 12) as usize;
    if dma_len != payload_len {
        return Err(RoceError::BadLength);
    }
    if verify_icrc {
        let end = bytes.len() - ICRC_LEN;
        if get_u32(bytes, end) != icrc(&bytes[..end]) {
            return Err(RoceError::BadIcrc);
        }
    }
    Ok(RoceWrite {
        dest_qp: get_u24(bytes, o + 5),
        psn: get_u24(bytes, o + 9),
        virtual_addr: u64::from_be_bytes(bytes[r..r + 8].try_into().unwrap()),
        rkey: get_u32(bytes, r + 8),
        payload: bytes[r + RETH_LEN..bytes.len() - ICRC_LEN].to_vec(),
    })
}
