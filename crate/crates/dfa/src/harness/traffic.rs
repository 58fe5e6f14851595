//! Deterministic synthetic traffic generation.
//!
//! A spec plus a seed fully determines the packet stream, byte for
//! byte, so every run is reproducible.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::types::{
    FiveTuple, PacketEvent, Timestamp, PROTO_TCP, PROTO_UDP, TCP_ACK, TCP_FIN, TCP_SYN,
};

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum GapDist {
    FixedNs(u64),
    /// Uniform in `[min, max]` nanoseconds.
    UniformNs { min: u64, max: u64 },
}

#[derive(Clone, Copy, PartialEq, Debug)]
pub enum SizeDist {
    Fixed(u32),
    /// Uniform in `[min, max]` bytes.
    Uniform { min: u32, max: u32 },
}

#[derive(Clone, PartialEq, Debug)]
pub struct TrafficSpec {
    pub num_flows: u32,
    pub packets_per_flow: u32,
    pub gap: GapDist,
    pub size: SizeDist,
    /// Fraction of flows carried over TCP; the rest are UDP.
    pub tcp_fraction: f64,
    pub seed: u64,
}

impl Default for TrafficSpec {
    fn default() -> Self {
        Self {
            num_flows: 1,
            packets_per_flow: 3,
            gap: GapDist::FixedNs(100_000),
            size: SizeDist::Fixed(400),
            tcp_fraction: 1.0,
            seed: 1,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TrafficError {
    #[error("num_flows and packets_per_flow must be at least 1")]
    EmptySpec,
    #[error("uniform range has min > max")]
    BadRange,
    #[error("packet sizes must be at least 1 byte")]
    ZeroSize,
    #[error("tcp_fraction must lie in [0, 1]")]
    BadFraction,
}

fn validate(spec: &TrafficSpec) -> Result<(), TrafficError> {
    if spec.num_flows == 0 || spec.packets_per_flow == 0 {
        return Err(TrafficError::EmptySpec);
    }
    if let GapDist::UniformNs { min, max } = spec.gap {
        if min > max {
            return Err(TrafficError::BadRange);
        }
    }
    match spec.size {
        SizeDist::Fixed(0) => return Err(TrafficError::ZeroSize),
        SizeDist::Uniform { min, max } => {
            if min > max {
                return Err(TrafficError::BadRange);
            }
            if min == 0 {
                return Err(TrafficError::ZeroSize);
            }
        }
        SizeDist::Fixed(_) => {}
    }
    if !(0.0..=1.0).contains(&spec.tcp_fraction) {
        return Err(TrafficError::BadFraction);
    }
    Ok(())
}

/// Synthesized flow key for flow index `i`: unique source address
/// under a fixed destination service.
fn flow_tuple(i: u32, protocol: u8) -> FiveTuple {
    FiveTuple::new(
        std::net::Ipv4Addr::from(0x0A00_0000 | (i & 0x00FF_FFFF)),
        std::net::Ipv4Addr::new(192, 0, 2, 1),
        1024 + (i % 60_000) as u16,
        443,
        protocol,
    )
}

/// Generates the packet stream: timestamp-sorted, each flow starting
/// at t = 0. TCP flows begin with SYN and end with FIN.
pub fn gen_traffic(spec: &TrafficSpec) -> Result<Vec<PacketEvent>, TrafficError> {
    validate(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut events = Vec::with_capacity(spec.num_flows as usize * spec.packets_per_flow as usize);
    for i in 0..spec.num_flows {
        let tcp = rng.random_bool(spec.tcp_fraction);
        let ft = flow_tuple(i, if tcp { PROTO_TCP } else { PROTO_UDP });
        let mut ts = 0u64;
        for j in 0..spec.packets_per_flow {
            let size = match spec.size {
                SizeDist::Fixed(s) => s,
                SizeDist::Uniform { min, max } => rng.random_range(min..=max),
            };
            let flags = if tcp {
                if j == 0 {
                    TCP_SYN
                } else if j == spec.packets_per_flow - 1 {
                    TCP_FIN | TCP_ACK
                } else {
                    TCP_ACK
                }
            } else {
                0
            };
            events.push(PacketEvent {
                ts: Timestamp::from_nanos(ts),
                five_tuple: ft,
                size_bytes: size,
                tcp_flags: flags,
            });
            let gap = match spec.gap {
                GapDist::FixedNs(g) => g,
                GapDist::UniformNs { min, max } => rng.random_range(min..=max),
            };
            ts += gap;
        }
    }
    // stable: ties keep flow order
    events.sort_by_key(|e| e.ts);
    Ok(events)
}
