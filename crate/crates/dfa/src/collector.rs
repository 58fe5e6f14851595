//! The collector: an emulated RDMA-registered memory region holding
//! ten 64-byte history entries per flow, the NIC-side write applier,
//! the occupancy scan, and reconstruction of flow statistics from
//! entry sums.
//!
//! The region is zero-initialized; only `apply_write` mutates it, with
//! the same protection checks a NIC would enforce (rkey match, bounds,
//! optional ICRC). Scans and history reads require a quiesced region:
//! the harness runs them only after all traffic has drained.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::translator::ConnParams;
use crate::types::{decode_entry, DecodedCell, TelemetryEntry, ENTRY_LEN};
use crate::wire::{rocev2_decode, RoceError};

/// History entries per flow record.
pub const HISTORY_DEPTH: u32 = 10;

/// How written entries reach analysis memory. `Staged` models a
/// receive region in host memory with a periodic batched copy to the
/// device: every `batch_entries` writes cost one `latency_ns` stall.
/// `Direct` is the device-memory path with no copy.
#[derive(Clone, Copy, PartialEq, Debug)]
pub enum CopyModel {
    Direct,
    Staged { batch_entries: u32, latency_ns: u64 },
}

#[derive(Clone, Debug)]
pub struct CollectorConfig {
    /// Flow records the region is sized for.
    pub num_flows: u32,
    pub base_va: u64,
    pub rkey: u32,
    pub dest_qp: u32,
    pub copy_model: CopyModel,
    /// Verify the ICRC of incoming frames.
    pub verify_icrc: bool,
}

impl Default for CollectorConfig {
    fn default() -> Self {
        Self {
            num_flows: 1024,
            base_va: 0x10000,
            rkey: 0x1001,
            dest_qp: 0x11,
            copy_model: CopyModel::Direct,
            verify_icrc: true,
        }
    }
}

/// The registered memory: a flat zero-initialized byte store of
/// 64-byte cells.
pub struct MemoryRegion {
    base_va: u64,
    rkey: u32,
    bytes: Vec<u8>,
}

impl MemoryRegion {
    pub fn new(base_va: u64, len: u64, rkey: u32) -> Self {
        Self { base_va, rkey, bytes: vec![0u8; len as usize] }
    }

    pub fn base_va(&self) -> u64 {
        self.base_va
    }

    pub fn len(&self) -> u64 {
        self.bytes.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn num_cells(&self) -> u64 {
        self.len() / ENTRY_LEN as u64
    }

    pub fn cell(&self, index: u64) -> &[u8; ENTRY_LEN] {
        let off = index as usize * ENTRY_LEN;
        self.bytes[off..off + ENTRY_LEN].try_into().unwrap()
    }

    pub fn cell_mut(&mut self, index: u64) -> &mut [u8] {
        let off = index as usize * ENTRY_LEN;
        &mut self.bytes[off..off + ENTRY_LEN]
    }

    fn contains(&self, va: u64, len: u64) -> bool {
        va >= self.base_va && va + len <= self.base_va + self.len()
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum HandshakeError {
    #[error("connection already established")]
    AlreadyConnected,
}

/// Why an incoming write was discarded.
#[derive(Debug, PartialEq, Eq)]
pub enum WriteDrop {
    Malformed(RoceError),
    BadRkey,
    OutOfBounds,
}

#[derive(Clone, Copy, Default, Debug)]
pub struct CollectorCounters {
    pub writes_applied: u64,
    pub dropped_malformed: u64,
    pub dropped_rkey: u64,
    pub dropped_bounds: u64,
    pub out_of_order_psn: u64,
}

/// Classification counts over every cell of the region.
#[derive(Clone, Copy, Default, PartialEq, Eq, Debug)]
pub struct ScanResult {
    pub written: u64,
    pub empty: u64,
    pub corrupt: u64,
}

impl ScanResult {
    pub fn total(&self) -> u64 {
        self.written + self.empty + self.corrupt
    }
}

/// Reconstructed statistics over one report interval (or since flow
/// start). Fields are `None` where the sample count makes them
/// undefined: everything at n = 0; variance and above at n = 1;
/// coefficient of variation when the mean is not positive; skewness
/// when the standard deviation is zero.
#[derive(Clone, Copy, Default, Debug)]
pub struct FlowStats {
    pub n: u32,
    pub mean_iat: Option<f64>,
    pub var_iat: Option<f64>,
    pub std_iat: Option<f64>,
    pub cov_iat: Option<f64>,
    pub skew_iat: Option<f64>,
    pub mean_ps: Option<f64>,
    pub var_ps: Option<f64>,
    pub std_ps: Option<f64>,
    pub cov_ps: Option<f64>,
    pub skew_ps: Option<f64>,
    /// Byte volume of the interval: the first packet-size sum delta.
    pub volume: Option<u64>,
}

fn moment_stats(n: u32, s1: u32, s2: u32, s3: u32) -> (Option<f64>, Option<f64>, Option<f64>, Option<f64>, Option<f64>) {
    if n == 0 {
        return (None, None, None, None, None);
    }
    let nf = n as f64;
    let mean = s1 as f64 / nf;
    if n == 1 {
        return (Some(mean), None, None, None, None);
    }
    let var = s2 as f64 / nf - mean * mean;
    let std = var.max(0.0).sqrt();
    let cov = (mean > 0.0).then(|| std / mean);
    let skew = (std > 0.0).then(|| {
        (s3 as f64 / nf - 3.0 * mean * var - mean * mean * mean) / (std * std * std)
    });
    (Some(mean), Some(var), Some(std), cov, skew)
}

/// Derives interval statistics by differencing cumulative sums of two
/// entries of the same flow (or absolute statistics when `prev` is
/// absent). Differences are wrapping, so results are exact as long as
/// the true interval sums fit in 32 bits.
pub fn reconstruct_stats(prev: Option<&TelemetryEntry>, e: &TelemetryEntry) -> FlowStats {
    let zero = TelemetryEntry {
        flow_id: e.flow_id,
        packet_count: 0,
        sum_iat: [0; 3],
        sum_ps: [0; 3],
        five_tuple: e.five_tuple,
    };
    let p = prev.unwrap_or(&zero);
    debug_assert!(prev.is_none() || p.flow_id == e.flow_id, "entries must belong to one flow");
    let n = e.packet_count.wrapping_sub(p.packet_count);
    let d = |cur: [u32; 3], old: [u32; 3], k: usize| cur[k].wrapping_sub(old[k]);
    let (mean_iat, var_iat, std_iat, cov_iat, skew_iat) = moment_stats(
        n,
        d(e.sum_iat, p.sum_iat, 0),
        d(e.sum_iat, p.sum_iat, 1),
        d(e.sum_iat, p.sum_iat, 2),
    );
    let (mean_ps, var_ps, std_ps, cov_ps, skew_ps) = moment_stats(
        n,
        d(e.sum_ps, p.sum_ps, 0),
        d(e.sum_ps, p.sum_ps, 1),
        d(e.sum_ps, p.sum_ps, 2),
    );
    FlowStats {
        n,
        mean_iat,
        var_iat,
        std_iat,
        cov_iat,
        skew_iat,
        mean_ps,
        var_ps,
        std_ps,
        cov_ps,
        skew_ps,
        volume: (n > 0).then(|| d(e.sum_ps, p.sum_ps, 0) as u64),
    }
}

pub struct Collector {
    cfg: CollectorConfig,
    region: MemoryRegion,
    connected: bool,
    expected_psn: Option<u32>,
    staged_pending: u32,
    pub counters: CollectorCounters,
}

impl Collector {
    pub fn new(cfg: CollectorConfig) -> Self {
        let len = cfg.num_flows as u64 * HISTORY_DEPTH as u64 * ENTRY_LEN as u64;
        let region = MemoryRegion::new(cfg.base_va, len, cfg.rkey);
        Self {
            cfg,
            region,
            connected: false,
            expected_psn: None,
            staged_pending: 0,
            counters: CollectorCounters::default(),
        }
    }

    pub fn region(&self) -> &MemoryRegion {
        &self.region
    }

    pub fn region_mut(&mut self) -> &mut MemoryRegion {
        &mut self.region
    }

    /// Shares the connection parameters for the single write-only
    /// queue pair. A second handshake is rejected.
    pub fn handshake(&mut self) -> Result<ConnParams, HandshakeError> {
        if self.connected {
            return Err(HandshakeError::AlreadyConnected);
        }
        self.connected = true;
        Ok(ConnParams {
            base_va: self.region.base_va,
            region_len: self.region.len(),
            rkey: self.region.rkey,
            dest_qp: self.cfg.dest_qp,
        })
    }

    /// Applies one WRITE-Only frame: protection checks, then the
    /// payload is copied whole into the region. Out-of-order PSNs are
    /// applied anyway (unreliable delivery) but counted.
    pub fn apply_write(&mut self, frame: &[u8]) -> Result<(), WriteDrop> {
        let w = match rocev2_decode(frame, self.cfg.verify_icrc) {
            Ok(w) => w,
            Err(e) => {
                self.counters.dropped_malformed += 1;
                return Err(WriteDrop::Malformed(e));
            }
        };
        if w.rkey != self.region.rkey {
            self.counters.dropped_rkey += 1;
            return Err(WriteDrop::BadRkey);
        }
        if !self.region.contains(w.virtual_addr, w.payload.len() as u64) {
            self.counters.dropped_bounds += 1;
            return Err(WriteDrop::OutOfBounds);
        }
        if let Some(expected) = self.expected_psn {
            if w.psn != expected {
                self.counters.out_of_order_psn += 1;
            }
        }
        self.expected_psn = Some((w.psn + 1) & 0xFF_FFFF);
        let off = (w.virtual_addr - self.region.base_va) as usize;
        self.region.bytes[off..off + w.payload.len()].copy_from_slice(&w.payload);
        self.counters.writes_applied += 1;
        self.stage_copy();
        Ok(())
    }

    /// Models the staged copy path: one stall per full batch.
    fn stage_copy(&mut self) {
        if let CopyModel::Staged { batch_entries, latency_ns } = self.cfg.copy_model {
            self.staged_pending += 1;
            if self.staged_pending >= batch_entries {
                self.staged_pending = 0;
                std::thread::sleep(std::time::Duration::from_nanos(latency_ns));
            }
        }
    }

    /// Classifies every cell of the quiesced region in parallel.
    pub fn scan(&self) -> ScanResult {
        self.region
            .bytes
            .par_chunks_exact(ENTRY_LEN)
            .map(|cell| {
                let cell: &[u8; ENTRY_LEN] = cell.try_into().unwrap();
                match decode_entry(cell) {
                    DecodedCell::Empty => ScanResult { empty: 1, ..Default::default() },
                    DecodedCell::Corrupt => ScanResult { corrupt: 1, ..Default::default() },
                    DecodedCell::Entry(_) => ScanResult { written: 1, ..Default::default() },
                }
            })
            .reduce(ScanResult::default, |a, b| ScanResult {
                written: a.written + b.written,
                empty: a.empty + b.empty,
                corrupt: a.corrupt + b.corrupt,
            })
    }

    /// The written entries of one flow's ten slots in chronological
    /// order. Entries carry no time field, but cumulative sums make
    /// the packet count strictly increasing across a flow's reports,
    /// which recovers the ring order.
    pub fn read_history(&self, flow_id: u32) -> Vec<TelemetryEntry> {
        let mut entries: Vec<TelemetryEntry> = (0..HISTORY_DEPTH as u64)
            .filter_map(|slot| {
                let index = flow_id as u64 * HISTORY_DEPTH as u64 + slot;
                if index >= self.region.num_cells() {
                    return None;
                }
                match decode_entry(self.region.cell(index)) {
                    DecodedCell::Entry(e) => Some(e),
                    _ => None,
                }
            })
            .collect();
        entries.sort_by_key(|e| e.packet_count);
        entries
    }

    /// Scan detail as CSV: one row per written or corrupt cell.
    pub fn write_scan_csv<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(
            out,
            "cell_index,state,flow_id,packet_count,sum_iat1,sum_iat2,sum_iat3,sum_ps1,sum_ps2,sum_ps3"
        )?;
        for index in 0..self.region.num_cells() {
            match decode_entry(self.region.cell(index)) {
                DecodedCell::Empty => {}
                DecodedCell::Corrupt => writeln!(out, "{index},corrupt,,,,,,,,")?,
                DecodedCell::Entry(e) => writeln!(
                    out,
                    "{index},written,{},{},{},{},{},{},{},{}",
                    e.flow_id,
                    e.packet_count,
                    e.sum_iat[0],
                    e.sum_iat[1],
                    e.sum_iat[2],
                    e.sum_ps[0],
                    e.sum_ps[1],
                    e.sum_ps[2]
                )?,
            }
        }
        Ok(())
    }

    pub fn metrics(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("collector.writes_applied", self.counters.writes_applied),
            ("collector.dropped_malformed", self.counters.dropped_malformed),
            ("collector.dropped_rkey", self.counters.dropped_rkey),
            ("collector.dropped_bounds", self.counters.dropped_bounds),
            ("collector.out_of_order_psn", self.counters.out_of_order_psn),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::translator::{Translator, TranslatorConfig, TranslateOutcome};
    use crate::types::{encode_entry, FiveTuple};
    use crate::wire::{rocev2_encode_write_only, DtaReport, NetConfig};
    use std::net::Ipv4Addr;

    fn tuple() -> FiveTuple {
        FiveTuple::new(Ipv4Addr::new(10, 0, 0, 1), Ipv4Addr::new(10, 0, 0, 2), 1, 2, 17)
    }

    fn entry(flow_id: u32, count: u32) -> TelemetryEntry {
        TelemetryEntry {
            flow_id,
            packet_count: count,
            sum_iat: [count, count * 2, count * 3],
            sum_ps: [count * 100, count * 200, count * 300],
            five_tuple: tuple(),
        }
    }

    fn collector(num_flows: u32) -> Collector {
        Collector::new(CollectorConfig { num_flows, ..CollectorConfig::default() })
    }

    fn write_cell(c: &mut Collector, cell: u64, e: &TelemetryEntry, psn: u32) {
        let frame = rocev2_encode_write_only(
            c.region().base_va() + cell * 64,
            0x1001,
            0x11,
            psn,
            &encode_entry(e),
            &NetConfig::default(),
        )
        .unwrap();
        c.apply_write(&frame).unwrap();
    }

    #[test]
    fn handshake_reports_region_geometry() {
        let mut c = collector(1 << 17);
        let p = c.handshake().unwrap();
        assert_eq!(p.region_len, 83_886_080, "2^17 flows x 10 slots x 64 B");
        assert_eq!(p.rkey, 0x1001);
        assert_eq!(p.dest_qp, 0x11);
    }

    #[test]
    fn handshake_twice_rejected() {
        let mut c = collector(4);
        c.handshake().unwrap();
        assert_eq!(c.handshake(), Err(HandshakeError::AlreadyConnected));
    }

    #[test]
    fn handshake_params_echo_into_queue_pair() {
        let mut c = collector(8);
        let p = c.handshake().unwrap();
        let mut t = Translator::new(TranslatorConfig { flow_capacity: 8, ..Default::default() });
        t.connect(p);
        let qp = t.queue_pair().unwrap();
        assert_eq!(qp.region_base, p.base_va);
        assert_eq!(qp.region_len, p.region_len);
        assert_eq!(qp.rkey, p.rkey);
        assert_eq!(qp.dest_qp, p.dest_qp);
        assert_eq!(qp.next_psn, 0);
    }

    #[test]
    fn apply_write_then_read_back() {
        let mut c = collector(8);
        let e = entry(3, 7);
        write_cell(&mut c, 37, &e, 0);
        assert_eq!(decode_entry(c.region().cell(37)), DecodedCell::Entry(e));
    }

    #[test]
    fn bad_rkey_leaves_region_unchanged() {
        let mut c = collector(8);
        let frame = rocev2_encode_write_only(
            c.region().base_va(),
            0xBAD,
            0x11,
            0,
            &encode_entry(&entry(0, 1)),
            &NetConfig::default(),
        )
        .unwrap();
        assert_eq!(c.apply_write(&frame), Err(WriteDrop::BadRkey));
        assert_eq!(c.counters.dropped_rkey, 1);
        assert_eq!(c.scan(), ScanResult { written: 0, empty: 80, corrupt: 0 });
    }

    #[test]
    fn out_of_bounds_write_dropped() {
        let mut c = collector(2);
        let beyond = c.region().base_va() + c.region().len();
        let frame = rocev2_encode_write_only(
            beyond,
            0x1001,
            0x11,
            0,
            &encode_entry(&entry(0, 1)),
            &NetConfig::default(),
        )
        .unwrap();
        assert_eq!(c.apply_write(&frame), Err(WriteDrop::OutOfBounds));
        assert_eq!(c.counters.dropped_bounds, 1);
    }

    #[test]
    fn scan_counts_match_construction() {
        // region with 4096 cells, 1000 distinct writes
        let mut c = Collector::new(CollectorConfig {
            num_flows: 4096 / HISTORY_DEPTH + 1,
            ..CollectorConfig::default()
        });
        let cells = c.region().num_cells();
        for i in 0..1000u64 {
            let cell = (i * 4) % cells; // distinct: 4096/4 > 1000
            write_cell(&mut c, cell, &entry(i as u32, 1), i as u32);
        }
        let scan = c.scan();
        assert_eq!(scan.written, 1000);
        assert_eq!(scan.corrupt, 0);
        assert_eq!(scan.empty, cells - 1000);
        assert_eq!(scan.total(), cells);
    }

    #[test]
    fn scan_all_zero_region() {
        let c = collector(16);
        let scan = c.scan();
        assert_eq!(scan.written, 0);
        assert_eq!(scan.corrupt, 0);
        assert_eq!(scan.empty, 160);
    }

    #[test]
    fn scan_detects_post_write_bit_flip() {
        let mut c = collector(8);
        write_cell(&mut c, 5, &entry(0, 3), 0);
        c.region_mut().cell_mut(5)[10] ^= 0x40;
        let scan = c.scan();
        assert_eq!(scan.written, 0);
        assert_eq!(scan.corrupt, 1);
    }

    #[test]
    fn out_of_order_psn_applied_but_counted() {
        let mut c = collector(8);
        write_cell(&mut c, 0, &entry(0, 1), 0);
        write_cell(&mut c, 1, &entry(0, 2), 5); // gap
        write_cell(&mut c, 2, &entry(0, 3), 6);
        assert_eq!(c.counters.writes_applied, 3);
        assert_eq!(c.counters.out_of_order_psn, 1);
    }

    #[test]
    fn read_history_orders_by_packet_count() {
        let mut c = collector(8);
        let mut t = Translator::new(TranslatorConfig { flow_capacity: 8, ..Default::default() });
        t.connect(c.handshake().unwrap());
        for n in 1..=25u32 {
            let r = DtaReport::new(0, 4, n, [n, n, n], [n, n, n], tuple());
            match t.translate_report(&r) {
                TranslateOutcome::Write(f) => c.apply_write(&f).unwrap(),
                other => panic!("{other:?}"),
            }
        }
        let hist = c.read_history(4);
        assert_eq!(hist.len(), 10);
        let counts: Vec<u32> = hist.iter().map(|e| e.packet_count).collect();
        assert_eq!(counts, (16..=25).collect::<Vec<u32>>());
        // the oldest surviving report (16) sits in slot (16-1) mod 10 = 5
        let slot5 = c.region().cell(4 * 10 + 5);
        assert_eq!(decode_entry(slot5), DecodedCell::Entry(hist[0]));
    }

    #[test]
    fn read_history_short_and_missing_flows() {
        let mut c = collector(8);
        let mut t = Translator::new(TranslatorConfig { flow_capacity: 8, ..Default::default() });
        t.connect(c.handshake().unwrap());
        for n in 1..=3u32 {
            let r = DtaReport::new(0, 2, n, [0, 0, 0], [n, n, n], tuple());
            if let TranslateOutcome::Write(f) = t.translate_report(&r) {
                c.apply_write(&f).unwrap();
            }
        }
        let hist = c.read_history(2);
        assert_eq!(hist.len(), 3);
        assert!(hist.windows(2).all(|w| w[0].packet_count < w[1].packet_count));
        assert!(c.read_history(7).is_empty());
    }

    #[test]
    fn reconstruct_absolute_stats_exact_trace() {
        // sizes {100, 200, 400}: mean 233.33, var 15555.55, std 124.72
        let e = TelemetryEntry {
            flow_id: 0,
            packet_count: 3,
            sum_iat: [0; 3],
            sum_ps: [700, 210_000, 73_000_000],
            five_tuple: tuple(),
        };
        let s = reconstruct_stats(None, &e);
        assert_eq!(s.n, 3);
        let mean = s.mean_ps.unwrap();
        let var = s.var_ps.unwrap();
        let std = s.std_ps.unwrap();
        assert!((mean - 700.0 / 3.0).abs() < 1e-9);
        assert!((var - 15555.555555555557).abs() < 1e-6);
        assert!((std - 124.72192).abs() < 1e-4);
        assert_eq!(s.volume, Some(700));
    }

    #[test]
    fn reconstruct_constant_sizes_zero_variance() {
        let e = TelemetryEntry {
            flow_id: 0,
            packet_count: 3,
            sum_iat: [0; 3],
            sum_ps: [900, 270_000, 81_000_000], // 300,300,300
            five_tuple: tuple(),
        };
        let s = reconstruct_stats(None, &e);
        assert!((s.var_ps.unwrap() - 0.0).abs() < 1e-6);
        assert_eq!(s.skew_ps, None, "skewness undefined at zero std");
        assert_eq!(s.cov_ps, Some(0.0));
    }

    #[test]
    fn reconstruct_markers_for_tiny_intervals() {
        let e0 = entry(1, 0);
        let s0 = reconstruct_stats(None, &e0);
        assert_eq!(s0.n, 0);
        assert!(s0.mean_ps.is_none() && s0.var_ps.is_none() && s0.volume.is_none());

        let e1 = TelemetryEntry { packet_count: 1, ..entry(1, 0) };
        let s1 = reconstruct_stats(None, &e1);
        assert_eq!(s1.n, 1);
        assert!(s1.mean_ps.is_some());
        assert!(s1.var_ps.is_none() && s1.skew_ps.is_none());
    }

    #[test]
    fn reconstruct_interval_by_differencing_wrapped_sums() {
        // cumulative sums that wrapped 2^32 between the two reports;
        // the interval delta is still exact because it fits 32 bits
        let prev = TelemetryEntry {
            flow_id: 9,
            packet_count: 1000,
            sum_iat: [0; 3],
            sum_ps: [u32::MAX - 99, u32::MAX - 9, u32::MAX],
            five_tuple: tuple(),
        };
        let cur = TelemetryEntry {
            flow_id: 9,
            packet_count: 1002,
            sum_iat: [0; 3],
            sum_ps: [
                (u32::MAX - 99).wrapping_add(300),
                (u32::MAX - 9).wrapping_add(50_000),
                u32::MAX.wrapping_add(13_500_000),
            ],
            five_tuple: tuple(),
        };
        let s = reconstruct_stats(Some(&prev), &cur);
        assert_eq!(s.n, 2);
        assert!((s.mean_ps.unwrap() - 150.0).abs() < 1e-9);
        assert_eq!(s.volume, Some(300));
    }

    #[test]
    fn csv_export_lists_written_cells() {
        let mut c = collector(4);
        write_cell(&mut c, 12, &entry(1, 2), 0);
        let mut out = Vec::new();
        c.write_scan_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(
            lines[0],
            "cell_index,state,flow_id,packet_count,sum_iat1,sum_iat2,sum_iat3,sum_ps1,sum_ps2,sum_ps3"
        );
        assert_eq!(lines.len(), 2, "header plus one written cell");
        assert!(lines[1].starts_with("12,written,1,2,"));
    }
}
