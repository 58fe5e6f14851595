//! Flow-feature telemetry pipeline.
//!
//! Three roles connected by byte-exact wire formats:
//!
//! * [`reporter`] — a two-stage match-action pipeline that classifies
//!   packets, maintains per-flow moment registers, and emits gated
//!   feature reports, plus the control agent handling flow admission.
//! * [`translator`] — rewrites feature reports into RoCEv2 WRITE-Only
//!   frames, selecting a history slot and collector memory address per
//!   flow.
//! * [`collector`] — an emulated RDMA memory region with per-flow
//!   history rings, an occupancy scan, and statistic reconstruction.
//!
//! [`harness`] wires the three together in a deterministic in-process
//! fabric for validation runs and throughput benchmarks; [`wire`] holds
//! the packet codecs; [`logapprox`] the lookup-table power
//! approximation feeding the moment registers; [`types`] the shared
//! domain types and the 64-byte entry layout.

pub mod collector;
pub mod harness;
pub mod logapprox;
pub mod reporter;
pub mod translator;
pub mod types;
pub mod wire;
