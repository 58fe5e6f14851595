//! Software throughput benchmarks: the payload-size sweep and the
//! direct-versus-staged copy-model comparison.
//!
//! One thread synthesizes WRITE-Only frames, one applies them to the
//! collector region; a bounded channel is the only sharing point.
//! Results are software-scale; the hardware reference rates below are
//! printed for context only and are never pass/fail targets.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::sync_channel;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::collector::{Collector, CollectorConfig, CopyModel, HISTORY_DEPTH};
use crate::wire::{rocev2_encode_write_only, NetConfig, ROCEV2_PAYLOAD_SIZES};

/// Reference rates measured on 100 Gbps switch-to-GPU hardware, for
/// annotation alongside software results: (payload bytes, messages
/// per second, payload Gbps).
pub const HW_REFERENCE_SWEEP: [(usize, f64, f64); 5] = [
    (8, 32.0e6, 2.0),
    (16, 34.0e6, 4.4),
    (32, 34.0e6, 8.7),
    (64, 31.0e6, 15.9),
    (128, 28.0e6, 28.7),
];

/// Reference message rates at 64 B for the device-direct path versus
/// receive-into-host-then-copy.
pub const HW_REFERENCE_DIRECT_MSGS: f64 = 31.0e6;
pub const HW_REFERENCE_STAGED_MSGS: f64 = 25.0e6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BenchError {
    #[error("unsupported payload size {0}; choose from 8,16,32,64,128")]
    BadSize(usize),
    #[error("duration must be positive")]
    ZeroDuration,
}

/// One row of the sweep. `payload_gbps` is definitionally
/// `msgs_per_sec * size * 8 / 1e9`.
#[derive(Clone, Copy, Debug)]
pub struct BenchRow {
    pub size_bytes: usize,
    pub msgs_per_sec: f64,
    pub payload_gbps: f64,
}

impl BenchRow {
    fn new(size_bytes: usize, msgs_per_sec: f64) -> Self {
        Self { size_bytes, msgs_per_sec, payload_gbps: msgs_per_sec * size_bytes as f64 * 8.0 / 1e9 }
    }
}

/// Drives synthesized writes of `size` bytes at maximum rate for
/// `duration`; returns the achieved message rate.
fn run_once(size: usize, duration: Duration, copy_model: CopyModel) -> f64 {
    // enough room that consecutive writes target distinct cells
    let cells: u64 = 1 << 15;
    let num_flows = (cells * size as u64).div_ceil(HISTORY_DEPTH as u64 * 64) as u32 + 1;
    let mut collector = Collector::new(CollectorConfig {
        num_flows,
        copy_model,
        verify_icrc: false, // throughput path; integrity is covered elsewhere
        ..CollectorConfig::default()
    });
    let params = collector.handshake().unwrap();
    let net = NetConfig::default();
    let stop = AtomicBool::new(false);
    let (tx, rx) = sync_channel::<Vec<u8>>(256);

    let start = Instant::now();
    let applied = std::thread::scope(|s| {
        let stop = &stop;
        let net = &net;
        s.spawn(move || {
            // frame synthesis: the translator side of the loop; `tx`
            // moves in so the channel closes when this thread exits
            let mut psn = 0u32;
            let mut i = 0u64;
            let payload = vec![0xA5u8; size];
            while !stop.load(Ordering::Relaxed) {
                let addr = params.base_va + (i % cells) * size as u64;
                let frame =
                    rocev2_encode_write_only(addr, params.rkey, params.dest_qp, psn, &payload, net)
                        .expect("validated size");
                if tx.send(frame).is_err() {
                    break;
                }
                psn = (psn + 1) & 0xFF_FFFF;
                i += 1;
            }
        });
        let applier = s.spawn(|| {
            let mut applied = 0u64;
            while let Ok(frame) = rx.recv() {
                if collector.apply_write(&frame).is_ok() {
                    applied += 1;
                }
            }
            applied
        });
        std::thread::sleep(duration);
        stop.store(true, Ordering::Relaxed);
        applier.join().unwrap()
    });
    let elapsed = start.elapsed().as_secs_f64();
    applied as f64 / elapsed
}

/// Sweeps payload sizes at a saturated message rate through the
/// Translator → Collector path.
pub fn bench_payload_sweep(
    sizes: &[usize],
    duration_per_size: Duration,
) -> Result<Vec<BenchRow>, BenchError> {
    if duration_per_size.is_zero() {
        return Err(BenchError::ZeroDuration);
    }
    for &s in sizes {
        if !ROCEV2_PAYLOAD_SIZES.contains(&s) {
            return Err(BenchError::BadSize(s));
        }
    }
    Ok(sizes
        .iter()
        .map(|&size| BenchRow::new(size, run_once(size, duration_per_size, CopyModel::Direct)))
        .collect())
}

#[derive(Clone, Copy, Debug)]
pub struct CopyModelRow {
    pub mode: &'static str,
    pub msgs_per_sec: f64,
}

/// Runs the 64-byte workload under the direct and the staged copy
/// model. With any nonzero staging latency the direct path comes out
/// ahead.
pub fn staged_vs_direct_compare(
    duration_per_mode: Duration,
    staged: CopyModel,
) -> Result<[CopyModelRow; 2], BenchError> {
    if duration_per_mode.is_zero() {
        return Err(BenchError::ZeroDuration);
    }
    let direct = run_once(64, duration_per_mode, CopyModel::Direct);
    let staged = run_once(64, duration_per_mode, staged);
    Ok([
        CopyModelRow { mode: "direct", msgs_per_sec: direct },
        CopyModelRow { mode: "staged", msgs_per_sec: staged },
    ])
}

/// Default staging penalty: one 2 ms stall per 4096-entry batch.
pub fn default_staged_model() -> CopyModel {
    CopyModel::Staged { batch_entries: 4096, latency_ns: 2_000_000 }
}
