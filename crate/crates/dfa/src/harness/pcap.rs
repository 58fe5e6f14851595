//! Classic pcap ingestion: externally captured Ethernet traces feed
//! the same packet-event stream the synthetic generator produces.
//!
//! Supports the classic file format only (microsecond and nanosecond
//! magics, either byte order), link type Ethernet. Records that do not
//! parse as IPv4 TCP/UDP are skipped and counted.

use std::path::Path;

use thiserror::Error;

use crate::types::{FiveTuple, PacketEvent, Timestamp, PROTO_TCP, PROTO_UDP};
use crate::wire::{ETHERTYPE_IPV4, ETH_LEN};

const MAGIC_US: u32 = 0xA1B2_C3D4;
const MAGIC_NS: u32 = 0xA1B2_3C4D;
const LINKTYPE_ETHERNET: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PcapError {
    #[error("not a classic pcap file (bad magic {0:#010x})")]
    BadMagic(u32),
    #[error("unsupported link type {0}; only Ethernet is supported")]
    BadLinkType(u32),
    #[error("truncated file")]
    Truncated,
    #[error("I/O error: {0}")]
    Io(String),
}

#[derive(Clone, Copy, Default, Debug, PartialEq, Eq)]
pub struct PcapStats {
    /// Records present in the file.
    pub records: u64,
    /// Records skipped because they are not IPv4 TCP/UDP.
    pub skipped: u64,
}

/// Parses an in-memory pcap image.
pub fn parse_pcap(bytes: &[u8]) -> Result<(Vec<PacketEvent>, PcapStats), PcapError> {
    if bytes.len() < 24 {
        return Err(PcapError::Truncated);
    }
    let magic = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let (swap, nanos) = match magic {
        MAGIC_US => (false, false),
        MAGIC_NS => (false, true),
        m if m.swap_bytes() == MAGIC_US => (true, false),
        m if m.swap_bytes() == MAGIC_NS => (true, true),
        m => return Err(PcapError::BadMagic(m)),
    };
    let read32 = |b: &[u8], off: usize| -> u32 {
        let v = u32::from_le_bytes(b[off..off + 4].try_into().unwrap());
        if swap {
            v.swap_bytes()
        } else {
            v
        }
    };
    let linktype = read32(bytes, 20);
    if linktype != LINKTYPE_ETHERNET {
        return Err(PcapError::BadLinkType(linktype));
    }

    let mut events = Vec::new();
    let mut stats = PcapStats::default();
    let mut pos = 24usize;
    while pos < bytes.len() {
        if pos + 16 > bytes.len() {
            return Err(PcapError::Truncated);
        }
        let ts_sec = read32(bytes, pos) as u64;
        let ts_frac = read32(bytes, pos + 4) as u64;
        let incl_len = read32(bytes, pos + 8) as usize;
        let orig_len = read32(bytes, pos + 12);
        pos += 16;
        if pos + incl_len > bytes.len() {
            return Err(PcapError::Truncated);
        }
        let data = &bytes[pos..pos + incl_len];
        pos += incl_len;
        stats.records += 1;
        let ts_ns = ts_sec * 1_000_000_000 + if nanos { ts_frac } else { ts_frac * 1_000 };
        match parse_frame(data, ts_ns, orig_len) {
            Some(ev) => events.push(ev),
            None => stats.skipped += 1,
        }
    }
    // captures are not guaranteed monotone; the pipeline needs
    // non-decreasing timestamps
    events.sort_by_key(|e| e.ts);
    Ok((events, stats))
}

/// Extracts a packet event from one Ethernet frame, or `None` when it
/// is not IPv4 TCP/UDP.
fn parse_frame(data: &[u8], ts_ns: u64, orig_len: u32) -> Option<PacketEvent> {
    if data.len() < ETH_LEN + 20 {
        return None;
    }
    if u16::from_be_bytes([data[12], data[13]]) != ETHERTYPE_IPV4 {
        return None;
    }
    let ip = &data[ETH_LEN..];
    if ip[0] >> 4 != 4 {
        return None;
    }
    let ihl = ((ip[0] & 0x0F) as usize) * 4;
    if ihl < 20 || ip.len() < ihl + 4 {
        return None;
    }
    let protocol = ip[9];
    if protocol != PROTO_TCP && protocol != PROTO_UDP {
        return None;
    }
    let l4 = &ip[ihl..];
    let src_port = u16::from_be_bytes([l4[0], l4[1]]);
    let dst_port = u16::from_be_bytes([l4[2], l4[3]]);
    let tcp_flags = if protocol == PROTO_TCP {
        if l4.len() < 14 {
            return None;
        }
        l4[13]
    } else {
        0
    };
    Some(PacketEvent {
        ts: Timestamp::from_nanos(ts_ns),
        five_tuple: FiveTuple::new(
            std::net::Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]),
            std::net::Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]),
            src_port,
            dst_port,
            protocol,
        ),
        size_bytes: orig_len,
        tcp_flags,
    })
}

/// Reads a pcap file from disk.
pub fn read_pcap<P: AsRef<Path>>(path: P) -> Result<(Vec<PacketEvent>, PcapStats), PcapError> {
    let bytes = std::fs::read(path).map_err(|e| PcapError::Io(e.to_string()))?;
    parse_pcap(&bytes)
}
