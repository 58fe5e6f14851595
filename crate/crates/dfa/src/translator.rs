//! The translator: rewrites feature reports into RoCEv2 WRITE-Only
//! frames against the collector's memory region.
//!
//! Per flow it keeps an 8-bit history counter selecting which of the
//! flow's history slots the next report lands in, wrapping at the
//! history depth. The write address is a pure function of flow ID and
//! slot, so distinct (flow, slot) pairs never overlap. One queue pair
//! carries all writes; its PSN advances by exactly one per emitted
//! frame.

use crate::types::{encode_entry, TelemetryEntry, ENTRY_LEN};
use crate::wire::{
    dta_decode, rocev2_encode_write_only, DtaError, DtaReport, NetConfig,
};

/// History entries per flow record.
pub const HISTORY_DEPTH: u8 = 10;

#[derive(Clone, Debug)]
pub struct TranslatorConfig {
    pub history_depth: u8,
    /// Flow-ID space; reports with IDs at or beyond it are dropped.
    pub flow_capacity: u32,
    pub net: NetConfig,
}

impl Default for TranslatorConfig {
    fn default() -> Self {
        Self { history_depth: HISTORY_DEPTH, flow_capacity: 131_072, net: NetConfig::default() }
    }
}

/// Connection parameters handed over by the collector.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct ConnParams {
    pub base_va: u64,
    pub region_len: u64,
    pub rkey: u32,
    pub dest_qp: u32,
}

/// Write-side state of the single queue pair.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct QueuePairState {
    pub dest_qp: u32,
    pub rkey: u32,
    pub region_base: u64,
    pub region_len: u64,
    pub next_psn: u32,
}

#[derive(Clone, Copy, Default, Debug)]
pub struct TranslatorCounters {
    pub translated: u64,
    pub dropped_parse: u64,
    pub dropped_bounds: u64,
    pub dropped_flow_range: u64,
    pub passthrough: u64,
}

/// What happened to one ingress frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TranslateOutcome {
    /// A WRITE-Only frame to forward to the collector.
    Write(Vec<u8>),
    /// Not a telemetry frame; forward unchanged as normal traffic.
    PassThrough,
    /// Malformed telemetry frame, dropped and counted.
    DroppedParse(DtaError),
    /// Write would fall outside the granted region.
    DroppedBounds,
    /// Flow ID beyond the configured capacity.
    DroppedFlowRange,
    /// No queue pair yet (handshake not done).
    DroppedNotConnected,
}

pub struct Translator {
    cfg: TranslatorConfig,
    history: Vec<u8>,
    qp: Option<QueuePairState>,
    pub counters: TranslatorCounters,
}

impl Translator {
    pub fn new(cfg: TranslatorConfig) -> Self {
        let history = vec![0u8; cfg.flow_capacity as usize];
        Self { cfg, history, qp: None, counters: TranslatorCounters::default() }
    }

    /// Adopts the collector's connection parameters verbatim.
    pub fn connect(&mut self, params: ConnParams) {
        self.qp = Some(QueuePairState {
            dest_qp: params.dest_qp,
            rkey: params.rkey,
            region_base: params.base_va,
            region_len: params.region_len,
            next_psn: 0,
        });
    }

    pub fn queue_pair(&self) -> Option<&QueuePairState> {
        self.qp.as_ref()
    }

    /// Current slot for `flow_id`, post-incrementing with wrap at the
    /// history depth.
    pub fn next_history_slot(&mut self, flow_id: u32) -> Option<u8> {
        if flow_id >= self.cfg.flow_capacity {
            self.counters.dropped_flow_range += 1;
            return None;
        }
        let slot = self.history[flow_id as usize];
        self.history[flow_id as usize] = (slot + 1) % self.cfg.history_depth;
        Some(slot)
    }

    fn peek_slot(&self, flow_id: u32) -> u8 {
        self.history[flow_id as usize]
    }

    /// Target address of (flow, slot):
    /// `region_base + (flow_id·depth + slot)·64`. `None` when the cell
    /// would extend past the granted region; no out-of-bounds write is
    /// ever emitted.
    pub fn map_address(&self, flow_id: u32, slot: u8) -> Option<u64> {
        let qp = self.qp.as_ref()?;
        let cell = flow_id as u64 * self.cfg.history_depth as u64 + slot as u64;
        let offset = cell * ENTRY_LEN as u64;
        if offset + ENTRY_LEN as u64 > qp.region_len {
            return None;
        }
        Some(qp.region_base + offset)
    }

    /// Consumes one ingress frame. Telemetry frames become WRITE-Only
    /// frames; everything else passes through or is dropped with a
    /// counter. The PSN and the flow's history counter advance exactly
    /// once per translated frame and not at all on drops.
    pub fn translate(&mut self, frame: &[u8]) -> TranslateOutcome {
        let report = match dta_decode(frame) {
            Ok(r) => r,
            Err(DtaError::NotDta) => {
                self.counters.passthrough += 1;
                return TranslateOutcome::PassThrough;
            }
            Err(e) => {
                self.counters.dropped_parse += 1;
                return TranslateOutcome::DroppedParse(e);
            }
        };
        self.translate_report(&report)
    }

    /// The telemetry half of `translate`, for callers holding an
    /// already-parsed report.
    pub fn translate_report(&mut self, report: &DtaReport) -> TranslateOutcome {
        if self.qp.is_none() {
            return TranslateOutcome::DroppedNotConnected;
        }
        if report.flow_id >= self.cfg.flow_capacity {
            self.counters.dropped_flow_range += 1;
            return TranslateOutcome::DroppedFlowRange;
        }
        let slot = self.peek_slot(report.flow_id);
        let Some(va) = self.map_address(report.flow_id, slot) else {
            self.counters.dropped_bounds += 1;
            return TranslateOutcome::DroppedBounds;
        };

        let entry = TelemetryEntry {
            flow_id: report.flow_id,
            packet_count: report.packet_count,
            sum_iat: report.sum_iat,
            sum_ps: report.sum_ps,
            five_tuple: report.five_tuple,
        };
        let payload = encode_entry(&entry);

        let qp = self.qp.as_mut().unwrap();
        let psn = qp.next_psn;
        let frame =
            rocev2_encode_write_only(va, qp.rkey, qp.dest_qp, psn, &payload, &self.cfg.net)
                .expect("64-byte entry payload is always encodable");
        qp.next_psn = (psn + 1) & 0xFF_FFFF;
        self.history[report.flow_id as usize] = (slot + 1) % self.cfg.history_depth;
        self.counters.translated += 1;
        TranslateOutcome::Write(frame)
    }

    pub fn metrics(&self) -> Vec<(&'static str, u64)> {
        vec![
            ("translator.translated", self.counters.translated),
            ("translator.dropped_parse", self.counters.dropped_parse),
            ("translator.dropped_bounds", self.counters.dropped_bounds),
            ("translator.dropped_flow_range", self.counters.dropped_flow_range),
            ("translator.passthrough", self.counters.passthrough),
        ]
    }
}
