//! The feature reporter: a two-stage match-action pipeline per
//! physical port plus the control agent deciding which flows to track.
//!
//! Ingress classifies the packet (exact-match five-tuple table),
//! evaluates report gating against the per-flow tracking table, and on
//! a table miss runs the new-flow notification logic (SYN/FIN for TCP,
//! bloom-filtered for UDP). Egress owns the feature registers and
//! builds the report; it only ever sees the ingress timestamp, carried
//! across in bridged metadata.
//!
//! The control agent consumes digests from an unbounded queue
//! (optionally rate-capped in simulation time), installs flows with
//! the lowest free flow ID, and tears them down on FIN or an optional
//! idle sweep.

pub mod bloom;

use std::collections::{BTreeSet, HashMap, VecDeque};

use crate::logapprox::MomentMode;
use crate::types::{
    iat32, FeatureState, FiveTuple, PacketEvent, Timestamp, PROTO_TCP, PROTO_UDP, TCP_FIN, TCP_SYN,
};
use crate::wire::DtaReport;

use bloom::{fnv1a, BloomParams, CountingBloom, PartitionedBloom};

/// Classification-table capacity per pipeline (2^17 exact-match
/// entries).
pub const PIPELINE_FLOW_CAPACITY: u32 = 131_072;

/// Default monitoring period: one report per flow per 20 ms.
pub const DEFAULT_PERIOD_NS: u64 = 20_000_000;

/// Default control-plane processing cap, flow modifications per
/// second. `None` lifts the cap.
pub const DEFAULT_DIGEST_RATE_PER_SEC: Option<u32> = Some(1_000);

#[derive(Clone, Debug)]
pub struct ReporterConfig {
    /// Packet pipelines; flows are spread across them by a hash of the
    /// five-tuple.
    pub pipelines: u32,
    /// Classification-table capacity per pipeline.
    pub flow_capacity: u32,
    /// Total flow-ID space (register array length per pipeline). Flow
    /// IDs are allocated globally so that no two live flows anywhere
    /// share an ID.
    pub flow_space: u32,
    /// Monitoring period applied to newly installed flows.
    pub period_ns: u64,
    pub reporter_id: u16,
    pub digest_rate_per_sec: Option<u32>,
    /// When set, `sweep_idle` removes flows whose last packet is older
    /// than this. Disabled by default: flows ending without FIN stay.
    pub idle_timeout_ns: Option<u64>,
    pub bloom: BloomParams,
}

impl Default for ReporterConfig {
    fn default() -> Self {
        Self {
            pipelines: 2,
            flow_capacity: PIPELINE_FLOW_CAPACITY,
            flow_space: 2 * PIPELINE_FLOW_CAPACITY,
            period_ns: DEFAULT_PERIOD_NS,
            reporter_id: 0,
            digest_rate_per_sec: DEFAULT_DIGEST_RATE_PER_SEC,
            idle_timeout_ns: None,
            bloom: BloomParams::default(),
        }
    }
}

impl ReporterConfig {
    /// A small configuration for tests and desk-scale runs: one
    /// pipeline sized to `flows`.
    pub fn desk(flows: u32) -> Self {
        Self {
            pipelines: 1,
            flow_capacity: flows.max(1),
            flow_space: flows.max(1),
            digest_rate_per_sec: None,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum DigestReason {
    NewTcpSyn,
    TcpFin,
    NewUdp,
}

/// Data-plane to control-plane notification.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Digest {
    pub five_tuple: FiveTuple,
    pub reason: DigestReason,
    pub ts: Timestamp,
}

/// Ingress-to-egress bridged metadata: egress computations must use
/// the ingress timestamp, never an egress-local clock.
#[derive(Clone, Copy, Debug)]
pub struct BridgedMeta {
    pub ingress_ts: Timestamp,
    pub flow_id: Option<u32>,
    pub do_report: bool,
}

#[derive(Clone, Copy, Default, Debug)]
struct TrackEntry {
    last_report_ts: u64,
    period_ns: u64,
    last_packet_ts: u64,
    installed: bool,
}

/// Applies one packet to the feature registers. The first packet of a
/// flow contributes packet-size terms but no inter-arrival terms.
pub fn update_features(fs: &mut FeatureState, size_bytes: u32, ts: Timestamp, mode: &MomentMode) {
    let first = fs.packet_count == 0;
    fs.packet_count = fs.packet_count.wrapping_add(1);
    if !first {
        let iat = iat32(ts, fs.last_ts32);
        for k in 1..=3u32 {
            let i = (k - 1) as usize;
            fs.sum_iat[i] = fs.sum_iat[i].wrapping_add(mode.addend(iat, k));
        }
    }
    for k in 1..=3u32 {
        let i = (k - 1) as usize;
        fs.sum_ps[i] = fs.sum_ps[i].wrapping_add(mode.addend(size_bytes, k));
    }
    fs.last_ts32 = ts.low32();
}

/// Builds the report message for a flow whose gate fired. Register
/// state is not reset; sums are cumulative across reports.
pub fn make_report(
    reporter_id: u16,
    flow_id: u32,
    fs: &FeatureState,
    five_tuple: FiveTuple,
) -> DtaReport {
    DtaReport::new(reporter_id, flow_id, fs.packet_count, fs.sum_iat, fs.sum_ps, five_tuple)
}

#[derive(Clone, Copy, Default, Debug)]
pub struct PipelineCounters {
    pub packets: u64,
    pub malformed: u64,
    pub reports: u64,
    pub digests: u64,
    pub udp_suppressed: u64,
}

/// One two-stage pipeline instance: classification and gating in
/// ingress, feature registers and report construction in egress.
pub struct Pipeline {
    classification: HashMap<FiveTuple, u32>,
    tracking: Vec<TrackEntry>,
    features: Vec<FeatureState>,
    bloom: PartitionedBloom,
    capacity: u32,
    reporter_id: u16,
    /// Test hook: skew of the egress-local clock relative to ingress.
    /// Feature math must be insensitive to it.
    pub egress_clock_offset_ns: u64,
    /// Diagnostic: what the egress stage's own clock last read.
    pub last_egress_clock_ns: u64,
    pub counters: PipelineCounters,
    last_ingress_ts: u64,
}

/// Outcome of one packet: the packet itself is always forwarded.
#[derive(Clone, Debug, Default)]
pub struct IngestOutput {
    pub report: Option<DtaReport>,
    pub digest: Option<Digest>,
}

impl Pipeline {
    fn new(cfg: &ReporterConfig) -> Self {
        Self {
            classification: HashMap::new(),
            tracking: vec![TrackEntry::default(); cfg.flow_space as usize],
            features: vec![FeatureState::default(); cfg.flow_space as usize],
            bloom: PartitionedBloom::new(cfg.bloom),
            capacity: cfg.flow_capacity,
            reporter_id: cfg.reporter_id,
            egress_clock_offset_ns: 0,
            last_egress_clock_ns: 0,
            counters: PipelineCounters::default(),
            last_ingress_ts: 0,
        }
    }

    pub fn table_len(&self) -> usize {
        self.classification.len()
    }

    pub fn at_capacity(&self) -> bool {
        self.classification.len() >= self.capacity as usize
    }

    pub fn is_tracked(&self, ft: &FiveTuple) -> bool {
        self.classification.contains_key(ft)
    }

    pub fn flow_id(&self, ft: &FiveTuple) -> Option<u32> {
        self.classification.get(ft).copied()
    }

    pub fn features(&self, flow_id: u32) -> Option<&FeatureState> {
        self.features.get(flow_id as usize)
    }

    /// Installs a tracking rule. The gate initializes to the install
    /// time, so the first report fires one full period later. Register
    /// state of a recycled flow ID is cleared here.
    pub fn install(&mut self, ft: FiveTuple, flow_id: u32, now: Timestamp, period_ns: u64) {
        self.classification.insert(ft, flow_id);
        self.tracking[flow_id as usize] = TrackEntry {
            last_report_ts: now.nanos(),
            period_ns,
            last_packet_ts: now.nanos(),
            installed: true,
        };
        self.features[flow_id as usize] = FeatureState::default();
    }

    pub fn remove(&mut self, ft: &FiveTuple) -> Option<u32> {
        let id = self.classification.remove(ft)?;
        self.tracking[id as usize].installed = false;
        Some(id)
    }

    /// Runs one packet through both stages.
    pub fn process(&mut self, p: &PacketEvent, mode: &MomentMode) -> IngestOutput {
        debug_assert!(
            p.ts.nanos() >= self.last_ingress_ts,
            "trace timestamps must be non-decreasing"
        );
        self.last_ingress_ts = p.ts.nanos();
        self.counters.packets += 1;
        if p.size_bytes == 0 {
            // malformed: counted, forwarded, no telemetry
            self.counters.malformed += 1;
            return IngestOutput::default();
        }

        // ingress: classification, gating, new-flow notifications
        let mut digest = None;
        let mut meta = BridgedMeta { ingress_ts: p.ts, flow_id: None, do_report: false };
        match self.classification.get(&p.five_tuple).copied() {
            Some(flow_id) => {
                let track = &mut self.tracking[flow_id as usize];
                track.last_packet_ts = p.ts.nanos();
                if p.ts.nanos() - track.last_report_ts >= track.period_ns {
                    meta.do_report = true;
                    track.last_report_ts = p.ts.nanos();
                }
                meta.flow_id = Some(flow_id);
                if p.five_tuple.protocol == PROTO_TCP && p.tcp_flags & TCP_FIN != 0 {
                    digest = Some(Digest {
                        five_tuple: p.five_tuple,
                        reason: DigestReason::TcpFin,
                        ts: p.ts,
                    });
                }
            }
            None => {
                digest = self.miss_digest(p);
            }
        }
        if digest.is_some() {
            self.counters.digests += 1;
        }

        // egress: feature registers and report construction, driven
        // only by the bridged ingress timestamp
        self.last_egress_clock_ns = meta.ingress_ts.nanos() + self.egress_clock_offset_ns;
        let report = meta.flow_id.map(|flow_id| {
            let fs = &mut self.features[flow_id as usize];
            update_features(fs, p.size_bytes, meta.ingress_ts, mode);
            meta.do_report
                .then(|| make_report(self.reporter_id, flow_id, fs, p.five_tuple))
        });
        let report = report.flatten();
        if report.is_some() {
            self.counters.reports += 1;
        }
        IngestOutput { report, digest }
    }

    /// Notification policy on a classification miss: TCP packets reach
    /// the control plane only with SYN or FIN set; UDP packets only
    /// while the bloom filter has not seen the tuple.
    fn miss_digest(&mut self, p: &PacketEvent) -> Option<Digest> {
        match p.five_tuple.protocol {
            PROTO_TCP => {
                if p.tcp_flags & TCP_SYN != 0 {
                    Some(Digest {
                        five_tuple: p.five_tuple,
                        reason: DigestReason::NewTcpSyn,
                        ts: p.ts,
                    })
                } else if p.tcp_flags & TCP_FIN != 0 {
                    Some(Digest { five_tuple: p.five_tuple, reason: DigestReason::TcpFin, ts: p.ts })
                } else {
                    None
                }
            }
            PROTO_UDP => {
                if self.bloom.query(&p.five_tuple) {
                    self.counters.udp_suppressed += 1;
                    None
                } else {
                    self.bloom.insert(&p.five_tuple);
                    Some(Digest { five_tuple: p.five_tuple, reason: DigestReason::NewUdp, ts: p.ts })
                }
            }
            _ => None,
        }
    }
}

/// What the control plane decided for one digest.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum ControlAction {
    InstallFlow { flow_id: u32 },
    RemoveFlow { flow_id: u32 },
    Ignore,
}

/// Lowest-free-ID allocator over `[0, space)`.
struct IdAllocator {
    next_fresh: u32,
    freed: BTreeSet<u32>,
    space: u32,
}

impl IdAllocator {
    fn new(space: u32) -> Self {
        Self { next_fresh: 0, freed: BTreeSet::new(), space }
    }

    fn lowest_free(&self) -> Option<u32> {
        match self.freed.first() {
            Some(&id) => Some(id),
            None if self.next_fresh < self.space => Some(self.next_fresh),
            None => None,
        }
    }

    fn take(&mut self, id: u32) {
        if !self.freed.remove(&id) {
            debug_assert_eq!(id, self.next_fresh);
            self.next_fresh += 1;
        }
    }

    fn free(&mut self, id: u32) {
        self.freed.insert(id);
    }
}

#[derive(Clone, Copy, Debug)]
struct FlowRecord {
    pipeline: u32,
    flow_id: u32,
    protocol: u8,
}

#[derive(Clone, Copy, Default, Debug)]
pub struct ControlCounters {
    pub installed: u64,
    pub removed: u64,
    pub ignored: u64,
    pub rejected_capacity: u64,
}

struct PendingDigest {
    digest: Digest,
    pipeline: u32,
}

/// The control agent: flow admission and teardown, the counting bloom
/// shadow, and the optionally rate-capped digest queue.
pub struct ControlAgent {
    allocator: IdAllocator,
    flows: HashMap<FiveTuple, FlowRecord>,
    counting_bloom: CountingBloom,
    queue: VecDeque<PendingDigest>,
    /// Minimum simulated interval between processed digests.
    interval_ns: u64,
    next_free_ts: u64,
    pub counters: ControlCounters,
}

impl ControlAgent {
    fn new(cfg: &ReporterConfig) -> Self {
        let interval_ns = match cfg.digest_rate_per_sec {
            Some(rate) if rate > 0 => 1_000_000_000 / rate as u64,
            _ => 0,
        };
        Self {
            allocator: IdAllocator::new(cfg.flow_space),
            flows: HashMap::new(),
            counting_bloom: CountingBloom::new(cfg.bloom),
            queue: VecDeque::new(),
            interval_ns,
            next_free_ts: 0,
            counters: ControlCounters::default(),
        }
    }

    pub fn live_flows(&self) -> usize {
        self.flows.len()
    }
}

/// A reporter: its pipelines plus the control agent, connected by the
/// digest queue and table-update commands.
pub struct Reporter {
    cfg: ReporterConfig,
    pub mode: MomentMode,
    pipelines: Vec<Pipeline>,
    control: ControlAgent,
}

impl Reporter {
    pub fn new(cfg: ReporterConfig, mode: MomentMode) -> Self {
        assert!(cfg.pipelines >= 1, "at least one pipeline");
        assert!(
            cfg.flow_capacity <= PIPELINE_FLOW_CAPACITY,
            "per-pipeline capacity is bounded by the classification table"
        );
        let pipelines = (0..cfg.pipelines).map(|_| Pipeline::new(&cfg)).collect();
        let control = ControlAgent::new(&cfg);
        Self { cfg, mode, pipelines, control }
    }

    pub fn config(&self) -> &ReporterConfig {
        &self.cfg
    }

    pub fn pipeline(&self, i: u32) -> &Pipeline {
        &self.pipelines[i as usize]
    }

    pub fn pipeline_mut(&mut self, i: u32) -> &mut Pipeline {
        &mut self.pipelines[i as usize]
    }

    pub fn control_counters(&self) -> ControlCounters {
        self.control.counters
    }

    /// Pipeline selection: hash of the five-tuple.
    pub fn pipeline_of(&self, ft: &FiveTuple) -> u32 {
        (fnv1a(&ft.encode(), 0x9E37_79B9_7F4A_7C15) % self.cfg.pipelines as u64) as u32
    }

    /// Runs one packet: always forwards, may emit one report and queue
    /// one digest.
    pub fn ingest_packet(&mut self, p: &PacketEvent) -> IngestOutput {
        let pl = self.pipeline_of(&p.five_tuple);
        let out = self.pipelines[pl as usize].process(p, &self.mode);
        if let Some(digest) = out.digest {
            self.control.queue.push_back(PendingDigest { digest, pipeline: pl });
        }
        out
    }

    /// The admission decision for one digest, without applying it.
    /// Default policy accepts every new flow while capacity remains.
    pub fn control_handle_digest(&self, d: &Digest, pipeline: u32) -> ControlAction {
        match d.reason {
            DigestReason::NewTcpSyn | DigestReason::NewUdp => {
                if self.control.flows.contains_key(&d.five_tuple) {
                    return ControlAction::Ignore;
                }
                if self.pipelines[pipeline as usize].at_capacity() {
                    return ControlAction::Ignore;
                }
                match self.control.allocator.lowest_free() {
                    Some(flow_id) => ControlAction::InstallFlow { flow_id },
                    None => ControlAction::Ignore,
                }
            }
            DigestReason::TcpFin => match self.control.flows.get(&d.five_tuple) {
                Some(rec) => ControlAction::RemoveFlow { flow_id: rec.flow_id },
                None => ControlAction::Ignore,
            },
        }
    }

    fn apply_digest(&mut self, pending: PendingDigest) {
        let PendingDigest { digest: d, pipeline } = pending;
        let action = self.control_handle_digest(&d, pipeline);
        if d.reason == DigestReason::NewUdp {
            self.control.counting_bloom.increment(&d.five_tuple);
        }
        match action {
            ControlAction::InstallFlow { flow_id } => {
                self.control.allocator.take(flow_id);
                self.control.flows.insert(
                    d.five_tuple,
                    FlowRecord { pipeline, flow_id, protocol: d.five_tuple.protocol },
                );
                self.pipelines[pipeline as usize].install(
                    d.five_tuple,
                    flow_id,
                    d.ts,
                    self.cfg.period_ns,
                );
                self.control.counters.installed += 1;
            }
            ControlAction::RemoveFlow { flow_id } => {
                self.remove_flow(&d.five_tuple, flow_id);
            }
            ControlAction::Ignore => {
                let at_capacity = matches!(d.reason, DigestReason::NewTcpSyn | DigestReason::NewUdp)
                    && !self.control.flows.contains_key(&d.five_tuple);
                if at_capacity {
                    self.control.counters.rejected_capacity += 1;
                } else {
                    self.control.counters.ignored += 1;
                }
            }
        }
    }

    fn remove_flow(&mut self, ft: &FiveTuple, flow_id: u32) {
        if let Some(rec) = self.control.flows.remove(ft) {
            self.pipelines[rec.pipeline as usize].remove(ft);
            self.control.allocator.free(flow_id);
            if rec.protocol == PROTO_UDP {
                for (p, idx) in self.control.counting_bloom.decrement(ft) {
                    self.pipelines[rec.pipeline as usize].bloom.clear_bit(p, idx);
                }
            }
            self.control.counters.removed += 1;
        }
    }

    /// Processes queued digests whose (possibly rate-capped) service
    /// time is due at `now`.
    pub fn drain_control(&mut self, now: Timestamp) {
        loop {
            let Some(front) = self.control.queue.front() else { break };
            let service_at = front.digest.ts.nanos().max(self.control.next_free_ts);
            if service_at > now.nanos() {
                break;
            }
            self.control.next_free_ts = service_at + self.control.interval_ns;
            let pending = self.control.queue.pop_front().unwrap();
            self.apply_digest(pending);
        }
    }

    /// Drains the digest queue regardless of the rate cap; used when a
    /// run quiesces.
    pub fn drain_control_all(&mut self) {
        while let Some(pending) = self.control.queue.pop_front() {
            self.apply_digest(pending);
        }
    }

    /// Optional teardown for flows idle longer than the configured
    /// timeout. No-op unless `idle_timeout_ns` is set.
    pub fn sweep_idle(&mut self, now: Timestamp) {
        let Some(timeout) = self.cfg.idle_timeout_ns else { return };
        let mut stale = Vec::new();
        for (ft, rec) in &self.control.flows {
            let track = &self.pipelines[rec.pipeline as usize].tracking[rec.flow_id as usize];
            if track.installed && now.nanos().saturating_sub(track.last_packet_ts) > timeout {
                stale.push((*ft, rec.flow_id));
            }
        }
        for (ft, flow_id) in stale {
            self.remove_flow(&ft, flow_id);
        }
    }

    /// Name → value counters across all pipelines and the control
    /// agent.
    pub fn metrics(&self) -> Vec<(&'static str, u64)> {
        let mut packets = 0;
        let mut malformed = 0;
        let mut reports = 0;
        let mut digests = 0;
        let mut udp_suppressed = 0;
        for pl in &self.pipelines {
            packets += pl.counters.packets;
            malformed += pl.counters.malformed;
            reports += pl.counters.reports;
            digests += pl.counters.digests;
            udp_suppressed += pl.counters.udp_suppressed;
        }
        vec![
            ("reporter.packets", packets),
            ("reporter.malformed", malformed),
            ("reporter.reports", reports),
            ("reporter.digests", digests),
            ("reporter.udp_suppressed", udp_suppressed),
            ("control.installed", self.control.counters.installed),
            ("control.removed", self.control.counters.removed),
            ("control.ignored", self.control.counters.ignored),
            ("control.rejected_capacity", self.control.counters.rejected_capacity),
            ("control.queue_depth", self.control.queue.len() as u64),
        ]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::logapprox::{oracle_pow, LogTableConfig, LogTables};
    use std::net::Ipv4Addr;

    fn tuple(n: u32, proto: u8) -> FiveTuple {
        FiveTuple::new(
            Ipv4Addr::from(0x0a00_0000 | n),
            Ipv4Addr::new(10, 99, 0, 1),
            (1000 + (n & 0x7FFF)) as u16,
            443,
            proto,
        )
    }

    fn pkt(ft: FiveTuple, ts_ns: u64, size: u32, flags: u8) -> PacketEvent {
        PacketEvent { ts: Timestamp::from_nanos(ts_ns), five_tuple: ft, size_bytes: size, tcp_flags: flags }
    }

    fn desk_reporter(flows: u32) -> Reporter {
        Reporter::new(ReporterConfig::desk(flows), MomentMode::Exact)
    }

    #[test]
    fn update_features_first_packet_has_no_iat() {
        let mut fs = FeatureState::default();
        update_features(&mut fs, 100, Timestamp::from_nanos(0), &MomentMode::Exact);
        assert_eq!(fs.packet_count, 1);
        assert_eq!(fs.sum_iat, [0, 0, 0]);
        assert_eq!(fs.sum_ps[0], 100);
    }

    #[test]
    fn update_features_exact_three_packet_trace() {
        let mode = MomentMode::Exact;
        let mut fs = FeatureState::default();
        update_features(&mut fs, 100, Timestamp::from_nanos(0), &mode);
        update_features(&mut fs, 200, Timestamp::from_micros(100), &mode);
        update_features(&mut fs, 400, Timestamp::from_micros(250), &mode);
        assert_eq!(fs.packet_count, 3);
        assert_eq!(fs.sum_ps, [700, 210_000, 73_000_000]);
        assert_eq!(fs.sum_iat[0], 250_000);
        assert_eq!(fs.sum_iat[1], 2_435_228_928); // (1e5² + 1.5e5²) mod 2^32
        assert_eq!(fs.sum_iat[2], 283_406_336); // (1e5³ + 1.5e5³) mod 2^32
    }

    #[test]
    fn update_features_approx_within_bound_prewrap() {
        let tables = LogTables::new(LogTableConfig { frac_bits: 8 }).unwrap();
        let mode = MomentMode::Approx(tables.clone());
        let mut fs = FeatureState::default();
        let trace = [(0u64, 100u32), (100_000, 200), (250_000, 400)];
        for (ts, size) in trace {
            update_features(&mut fs, size, Timestamp::from_nanos(ts), &mode);
        }
        // pre-wrap approximate sums, accumulated wide
        let iats = [100_000u32, 150_000];
        for k in 1..=3u32 {
            let bound = (((k + 1) as f64) / 256.0).exp2() - 1.0;
            let wide_iat: u128 = iats.iter().map(|&v| tables.approx_pow_wide(v, k)).sum();
            let exact_iat: u128 = iats.iter().map(|&v| oracle_pow(v, k)).sum();
            let rel = (wide_iat as f64 / exact_iat as f64 - 1.0).abs();
            assert!(rel <= bound, "k={k} rel={rel}");
            // the register holds the wide sum reduced mod 2^32
            assert_eq!(fs.sum_iat[(k - 1) as usize], wide_iat as u32);
            let wide_ps: u128 =
                [100u32, 200, 400].iter().map(|&v| tables.approx_pow_wide(v, k)).sum();
            assert_eq!(fs.sum_ps[(k - 1) as usize], wide_ps as u32);
        }
    }

    #[test]
    fn gating_example_trace() {
        let mut r = desk_reporter(16);
        let ft = tuple(1, PROTO_UDP);
        // install at t=0 via first-packet digest
        let out = r.ingest_packet(&pkt(ft, 0, 100, 0));
        assert_eq!(out.digest.map(|d| d.reason), Some(DigestReason::NewUdp));
        r.drain_control(Timestamp::from_nanos(0));
        assert!(r.pipeline(0).is_tracked(&ft));

        // tracked packets at 0+, 5 ms, 21 ms -> reports: none, none, 21 ms
        assert!(r.ingest_packet(&pkt(ft, 1, 100, 0)).report.is_none());
        assert!(r.ingest_packet(&pkt(ft, 5_000_000, 100, 0)).report.is_none());
        let out = r.ingest_packet(&pkt(ft, 21_000_000, 100, 0));
        assert!(out.report.is_some(), "gate fires once a full period has passed");
    }

    #[test]
    fn udp_digest_suppressed_after_first() {
        let mut r = desk_reporter(16);
        let ft = tuple(2, PROTO_UDP);
        // no drain: the flow stays untracked, so only the bloom filter
        // stops repeat digests
        assert!(r.ingest_packet(&pkt(ft, 0, 100, 0)).digest.is_some());
        assert!(r.ingest_packet(&pkt(ft, 10, 100, 0)).digest.is_none());
        assert!(r.ingest_packet(&pkt(ft, 20, 100, 0)).digest.is_none());
    }

    #[test]
    fn untracked_tcp_ack_produces_nothing() {
        let mut r = desk_reporter(16);
        let out = r.ingest_packet(&pkt(tuple(3, PROTO_TCP), 0, 100, crate::types::TCP_ACK));
        assert!(out.digest.is_none());
        assert!(out.report.is_none());
    }

    #[test]
    fn tcp_fin_on_tracked_flow_digests_and_updates() {
        let mut r = desk_reporter(16);
        let ft = tuple(4, PROTO_TCP);
        r.ingest_packet(&pkt(ft, 0, 60, TCP_SYN));
        r.drain_control(Timestamp::from_nanos(0));
        r.ingest_packet(&pkt(ft, 1000, 60, 0));
        let out = r.ingest_packet(&pkt(ft, 2000, 60, TCP_FIN));
        assert_eq!(out.digest.map(|d| d.reason), Some(DigestReason::TcpFin));
        let id = r.pipeline(0).flow_id(&ft).unwrap();
        // the FIN packet itself still updated the registers (the SYN
        // was a miss and never reached them)
        assert_eq!(r.pipeline(0).features(id).unwrap().packet_count, 2);
        r.drain_control(Timestamp::from_nanos(2000));
        assert!(!r.pipeline(0).is_tracked(&ft));
    }

    #[test]
    fn control_installs_lowest_free_id_and_reuses_after_fin() {
        let mut r = desk_reporter(16);
        for n in 0..8u32 {
            r.ingest_packet(&pkt(tuple(n, PROTO_TCP), n as u64, 60, TCP_SYN));
        }
        r.drain_control(Timestamp::from_nanos(100));
        assert_eq!(r.pipeline(0).flow_id(&tuple(0, PROTO_TCP)), Some(0));
        assert_eq!(r.pipeline(0).flow_id(&tuple(5, PROTO_TCP)), Some(5));

        // grow flow 5's registers, then remove it
        r.ingest_packet(&pkt(tuple(5, PROTO_TCP), 200, 60, 0));
        r.ingest_packet(&pkt(tuple(5, PROTO_TCP), 300, 60, TCP_FIN));
        r.drain_control(Timestamp::from_nanos(300));
        assert!(!r.pipeline(0).is_tracked(&tuple(5, PROTO_TCP)));

        // next install reuses ID 5 with zeroed state
        r.ingest_packet(&pkt(tuple(100, PROTO_TCP), 400, 60, TCP_SYN));
        r.drain_control(Timestamp::from_nanos(400));
        assert_eq!(r.pipeline(0).flow_id(&tuple(100, PROTO_TCP)), Some(5));
        assert_eq!(r.pipeline(0).features(5).unwrap().packet_count, 0);
    }

    #[test]
    fn capacity_exhaustion_rejects_with_counter() {
        let mut cfg = ReporterConfig::desk(4);
        cfg.flow_capacity = 4;
        cfg.flow_space = 4;
        let mut r = Reporter::new(cfg, MomentMode::Exact);
        for n in 0..5u32 {
            r.ingest_packet(&pkt(tuple(n, PROTO_TCP), n as u64, 60, TCP_SYN));
        }
        r.drain_control(Timestamp::from_nanos(100));
        assert_eq!(r.control_counters().installed, 4);
        assert_eq!(r.control_counters().rejected_capacity, 1);
    }

    #[test]
    fn per_flow_packet_count_matches_trace() {
        let mut r = desk_reporter(8);
        let flows: Vec<FiveTuple> = (0..4).map(|n| tuple(n, PROTO_UDP)).collect();
        let mut expected = vec![0u32; 4];
        let mut ts = 0u64;
        for round in 0..10 {
            for (i, ft) in flows.iter().enumerate() {
                if (round + i) % 3 != 0 {
                    continue;
                }
                r.ingest_packet(&pkt(*ft, ts, 100, 0));
                r.drain_control(Timestamp::from_nanos(ts));
                ts += 10;
            }
        }
        // replay knowledge: first packet per flow was a miss, the rest hit
        for (i, ft) in flows.iter().enumerate() {
            let seen = (0..10).filter(|round| (round + i) % 3 == 0).count() as u32;
            expected[i] = seen.saturating_sub(1);
            let id = r.pipeline(0).flow_id(ft).unwrap();
            assert_eq!(r.pipeline(0).features(id).unwrap().packet_count, expected[i], "flow {i}");
        }
    }

    #[test]
    fn egress_uses_bridged_ingress_timestamp() {
        let run = |offset: u64| {
            let mut r = desk_reporter(8);
            r.pipeline_mut(0).egress_clock_offset_ns = offset;
            let ft = tuple(7, PROTO_UDP);
            r.ingest_packet(&pkt(ft, 0, 100, 0));
            r.drain_control(Timestamp::from_nanos(0));
            let mut reports = Vec::new();
            for i in 1..2000u64 {
                let out = r.ingest_packet(&pkt(ft, i * 100_000, 100 + (i % 7) as u32, 0));
                if let Some(rep) = out.report {
                    reports.push(rep);
                }
            }
            let id = r.pipeline(0).flow_id(&ft).unwrap();
            (reports, *r.pipeline(0).features(id).unwrap(), r.pipeline(0).last_egress_clock_ns)
        };
        let (reports_a, fs_a, clock_a) = run(0);
        let (reports_b, fs_b, clock_b) = run(1_000_000_000_000);
        // the stage clocks genuinely differ...
        assert_ne!(clock_a, clock_b);
        // ...but features and reports are identical
        assert_eq!(fs_a, fs_b);
        assert_eq!(reports_a, reports_b);
        assert!(!reports_a.is_empty());
    }

    #[test]
    fn make_report_layout_and_purity() {
        let fs = FeatureState {
            packet_count: 3,
            last_ts32: 250_000,
            sum_iat: [250_000, 2_435_228_928, 283_406_336],
            sum_ps: [700, 210_000, 73_000_000],
        };
        let ft = tuple(9, PROTO_TCP);
        let a = make_report(1, 9, &fs, ft);
        let b = make_report(1, 9, &fs, ft);
        assert_eq!(a, b, "pure function of state");
        let v = a.feature_vector();
        assert_eq!(v.len(), 45);
        assert_eq!(u32::from_be_bytes(v[0..4].try_into().unwrap()), 3);
        assert_eq!(u32::from_be_bytes(v[4..8].try_into().unwrap()), 250_000);
        assert_eq!(u32::from_be_bytes(v[16..20].try_into().unwrap()), 700);
        assert_eq!(&v[28..45], &ft.encode());

        // zero-state forced report: statistics zero, tuple populated
        let zero = make_report(1, 9, &FeatureState::default(), ft);
        let zv = zero.feature_vector();
        assert!(zv[..28].iter().all(|&x| x == 0));
        assert_eq!(&zv[28..45], &ft.encode());
    }

    #[test]
    fn digest_rate_cap_defers_installs() {
        let mut cfg = ReporterConfig::desk(16);
        cfg.digest_rate_per_sec = Some(1000); // one install per ms
        let mut r = Reporter::new(cfg, MomentMode::Exact);
        for n in 0..4u32 {
            r.ingest_packet(&pkt(tuple(n, PROTO_TCP), 0, 60, TCP_SYN));
        }
        r.drain_control(Timestamp::from_nanos(0));
        assert_eq!(r.control_counters().installed, 1);
        r.drain_control(Timestamp::from_millis(2));
        assert_eq!(r.control_counters().installed, 3);
        r.drain_control(Timestamp::from_millis(10));
        assert_eq!(r.control_counters().installed, 4);
    }

    #[test]
    fn idle_sweep_recycles_udp_tuples() {
        let mut cfg = ReporterConfig::desk(16);
        cfg.idle_timeout_ns = Some(1_000_000);
        let mut r = Reporter::new(cfg, MomentMode::Exact);
        let ft = tuple(11, PROTO_UDP);
        r.ingest_packet(&pkt(ft, 0, 100, 0));
        r.drain_control(Timestamp::from_nanos(0));
        assert!(r.pipeline(0).is_tracked(&ft));

        r.sweep_idle(Timestamp::from_millis(5));
        assert!(!r.pipeline(0).is_tracked(&ft));

        // the recycled tuple generates a fresh digest and reinstalls
        let out = r.ingest_packet(&pkt(ft, 6_000_000, 100, 0));
        assert_eq!(out.digest.map(|d| d.reason), Some(DigestReason::NewUdp));
        r.drain_control(Timestamp::from_millis(6));
        assert!(r.pipeline(0).is_tracked(&ft));
    }

    #[test]
    fn malformed_packets_counted_not_processed() {
        let mut r = desk_reporter(8);
        let ft = tuple(12, PROTO_UDP);
        let out = r.ingest_packet(&pkt(ft, 0, 0, 0));
        assert!(out.digest.is_none() && out.report.is_none());
        assert_eq!(r.pipeline(0).counters.malformed, 1);
    }
}
