//! The deterministic in-process harness: synthetic or captured traffic
//! driven through Reporter → Translator → Collector in timestamp
//! order, plus the validation run and throughput benchmarks built on
//! top.
//!
//! Simulation runs are a single-threaded event loop, so `(spec,
//! fabric, seed)` fully determines the outcome. Bench runs are the one
//! place wall-clock threads appear.

pub mod bench;
pub mod fabric;
pub mod pcap;
pub mod traffic;

pub use bench::{bench_payload_sweep, staged_vs_direct_compare, BenchRow};
pub use fabric::FabricConfig;
pub use traffic::{gen_traffic, GapDist, SizeDist, TrafficSpec};

use std::cmp::Reverse;
use std::collections::BinaryHeap;
use std::io::Write;

use thiserror::Error;

use crate::collector::{Collector, CollectorConfig, CopyModel, ScanResult};
use crate::logapprox::{LogTableConfig, LogTables, MomentMode};
use crate::reporter::{Reporter, ReporterConfig, PIPELINE_FLOW_CAPACITY};
use crate::translator::{TranslateOutcome, Translator, TranslatorConfig};
use crate::types::{PacketEvent, Timestamp};
use crate::wire::{dta_encode, NetConfig};

use fabric::Link;

/// Everything a validation run needs besides traffic and fabric.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub period_ns: u64,
    /// Fractional bits of the power approximation; `None` runs the
    /// exact-arithmetic mode used by the statistics oracle.
    pub f_bits: Option<u32>,
    pub pipelines: u32,
    pub digest_rate_per_sec: Option<u32>,
    /// Flow records the collector region is sized for; also bounds the
    /// flow-ID space.
    pub collector_flows: u32,
    pub copy_model: CopyModel,
    pub verify_icrc: bool,
    pub net: NetConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            period_ns: crate::reporter::DEFAULT_PERIOD_NS,
            f_bits: Some(crate::logapprox::DEFAULT_FRAC_BITS),
            pipelines: 2,
            digest_rate_per_sec: None,
            collector_flows: 1024,
            copy_model: CopyModel::Direct,
            verify_icrc: true,
            net: NetConfig::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("traffic spec invalid: {0}")]
    Traffic(#[from] traffic::TrafficError),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("table configuration invalid: {0}")]
    Tables(#[from] crate::logapprox::LogTableError),
}

/// Outcome of a validation run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunMetrics {
    pub packets: u64,
    pub reports_sent: u64,
    pub writes_applied: u64,
    pub fabric_drops_dta: u64,
    pub fabric_drops_roce: u64,
    pub translator_drops: u64,
    pub collector_drops: u64,
    pub flows_installed: u64,
    pub flows_rejected: u64,
    pub out_of_order_psn: u64,
    pub scan: ScanResult,
    /// `|written − reports_sent| / reports_sent` (0 when nothing was
    /// sent).
    pub discrepancy: f64,
    /// Merged name → value counters from all components.
    pub counters: Vec<(String, u64)>,
}

impl RunMetrics {
    /// Every report is accounted for: applied or dropped somewhere.
    pub fn conserved(&self) -> bool {
        self.reports_sent
            == self.writes_applied
                + self.fabric_drops_dta
                + self.fabric_drops_roce
                + self.translator_drops
                + self.collector_drops
    }

    pub fn write_summary<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        writeln!(out, "packets             {}", self.packets)?;
        writeln!(out, "reports sent        {}", self.reports_sent)?;
        writeln!(out, "writes applied      {}", self.writes_applied)?;
        writeln!(
            out,
            "fabric drops        {} (reporter link) + {} (collector link)",
            self.fabric_drops_dta, self.fabric_drops_roce
        )?;
        writeln!(out, "translator drops    {}", self.translator_drops)?;
        writeln!(out, "collector drops     {}", self.collector_drops)?;
        writeln!(out, "flows installed     {}", self.flows_installed)?;
        writeln!(out, "flows rejected      {}", self.flows_rejected)?;
        writeln!(
            out,
            "scan                written={} empty={} corrupt={}",
            self.scan.written, self.scan.empty, self.scan.corrupt
        )?;
        writeln!(out, "discrepancy         {:.6}", self.discrepancy)?;
        Ok(())
    }
}

enum Event {
    Packet(usize),
    Dta(Vec<u8>),
    Roce(Vec<u8>),
}

/// Drives a packet stream through the full pipeline and scans the
/// region afterwards. Deterministic for a given (events, fabric, cfg).
pub fn run_events(
    events: &[PacketEvent],
    fab: &FabricConfig,
    cfg: &RunConfig,
    seed: u64,
) -> Result<RunMetrics, RunError> {
    let flows_needed = cfg.collector_flows;
    if cfg.pipelines == 0 {
        return Err(RunError::ConfigMismatch("at least one pipeline".into()));
    }
    let per_pipeline_capacity = flows_needed.min(PIPELINE_FLOW_CAPACITY);
    let mode = match cfg.f_bits {
        Some(f) => MomentMode::Approx(LogTables::new(LogTableConfig { frac_bits: f })?),
        None => MomentMode::Exact,
    };

    let mut reporter = Reporter::new(
        ReporterConfig {
            pipelines: cfg.pipelines,
            flow_capacity: per_pipeline_capacity,
            flow_space: flows_needed,
            period_ns: cfg.period_ns,
            digest_rate_per_sec: cfg.digest_rate_per_sec,
            ..ReporterConfig::default()
        },
        mode,
    );
    let mut translator = Translator::new(TranslatorConfig {
        flow_capacity: flows_needed,
        net: cfg.net.clone(),
        ..TranslatorConfig::default()
    });
    let mut collector = Collector::new(CollectorConfig {
        num_flows: flows_needed,
        copy_model: cfg.copy_model,
        verify_icrc: cfg.verify_icrc,
        ..CollectorConfig::default()
    });
    let params = collector
        .handshake()
        .map_err(|e| RunError::ConfigMismatch(e.to_string()))?;
    translator.connect(params);

    let mut link_dta = Link::new(fab.loss_reporter_translator, fab.latency_ns, fab.reorder_window_ns, seed ^ 0xD7A);
    let mut link_roce = Link::new(fab.loss_translator_collector, fab.latency_ns, fab.reorder_window_ns, seed ^ 0x20CE);

    let mut heap: BinaryHeap<Reverse<(u64, u64, usize)>> = BinaryHeap::new();
    let mut pool: Vec<Event> = Vec::new();
    let mut seq = 0u64;
    let mut push = |heap: &mut BinaryHeap<_>, pool: &mut Vec<Event>, at: u64, ev: Event| {
        pool.push(ev);
        heap.push(Reverse((at, seq, pool.len() - 1)));
        seq += 1;
    };
    for (i, ev) in events.iter().enumerate() {
        push(&mut heap, &mut pool, ev.ts.nanos(), Event::Packet(i));
    }

    let mut reports_sent = 0u64;
    while let Some(Reverse((at, _, idx))) = heap.pop() {
        // take the event out, leaving a tombstone
        let ev = std::mem::replace(&mut pool[idx], Event::Packet(usize::MAX));
        match ev {
            Event::Packet(i) => {
                let p = &events[i];
                reporter.drain_control(p.ts);
                let out = reporter.ingest_packet(p);
                if let Some(report) = out.report {
                    reports_sent += 1;
                    let frame = dta_encode(&report, &cfg.net)
                        .expect("reporter-built reports always encode");
                    if let Some(deliver) = link_dta.admit(at) {
                        push(&mut heap, &mut pool, deliver, Event::Dta(frame));
                    }
                }
            }
            Event::Dta(frame) => {
                if let TranslateOutcome::Write(roce) = translator.translate(&frame) {
                    if let Some(deliver) = link_roce.admit(at) {
                        push(&mut heap, &mut pool, deliver, Event::Roce(roce));
                    }
                }
            }
            Event::Roce(frame) => {
                let _ = collector.apply_write(&frame);
            }
        }
    }
    reporter.drain_control_all();

    // traffic has quiesced; the scan sees no concurrent writes
    let scan = collector.scan();
    let tc = translator.counters;
    let cc = collector.counters;
    let rc = reporter.control_counters();
    let translator_drops = tc.dropped_parse + tc.dropped_bounds + tc.dropped_flow_range;
    let collector_drops = cc.dropped_malformed + cc.dropped_rkey + cc.dropped_bounds;
    let discrepancy = if reports_sent == 0 {
        0.0
    } else {
        (scan.written as f64 - reports_sent as f64).abs() / reports_sent as f64
    };

    let mut counters: Vec<(String, u64)> = Vec::new();
    for (k, v) in reporter
        .metrics()
        .into_iter()
        .chain(translator.metrics())
        .chain(collector.metrics())
    {
        counters.push((k.to_string(), v));
    }
    counters.push(("fabric.drops_dta".into(), link_dta.drops));
    counters.push(("fabric.drops_roce".into(), link_roce.drops));

    Ok(RunMetrics {
        packets: events.len() as u64,
        reports_sent,
        writes_applied: cc.writes_applied,
        fabric_drops_dta: link_dta.drops,
        fabric_drops_roce: link_roce.drops,
        translator_drops,
        collector_drops,
        flows_installed: rc.installed,
        flows_rejected: rc.rejected_capacity,
        out_of_order_psn: cc.out_of_order_psn,
        scan,
        discrepancy,
        counters,
    })
}

/// Generates traffic from `spec` and runs it; the standard validation
/// entry point. Configuration mismatches are rejected before anything
/// runs.
pub fn run_pipeline(
    spec: &TrafficSpec,
    fab: &FabricConfig,
    cfg: &RunConfig,
) -> Result<RunMetrics, RunError> {
    if spec.num_flows > cfg.collector_flows {
        return Err(RunError::ConfigMismatch(format!(
            "traffic has {} flows but the collector region is sized for {}",
            spec.num_flows, cfg.collector_flows
        )));
    }
    let events = gen_traffic(spec)?;
    run_events(&events, fab, cfg, spec.seed)
}
