//! pmcl is a crash-consistency testing laboratory for persistent-memory file
//! systems, built around a software model of PM durability semantics.
//!
//! The pieces, bottom to top:
//!
//! * [`pmem`] — a byte-addressable device behind a simulated CPU cache. Writes
//!   stay volatile until a cache-line flush or non-temporal store puts them in
//!   flight and a store fence makes the in-flight set durable. Every event is
//!   recorded in a replayable trace.
//! * [`crash`] — turns a trace into crash states: one crash point per fence
//!   and per syscall boundary, then every admissible subset of the in-flight
//!   writes at that point, constructed in place with an undo log.
//! * [`reffs`] — a small journaling file system written against the device
//!   model, with a catalog of injectable consistency bugs modeled on defects
//!   found in real PM file systems.
//! * [`oracle`] — an independent in-memory POSIX model plus the checker that
//!   compares every crash state against the before/after oracle snapshots.
//! * [`acegen`] — bounded-exhaustive workload generation (no-sync ACE).
//! * [`fuzz`] — coverage-guided workload mutation with report triage.
//! * [`harness`] — campaign orchestration, parallel execution, result files.

pub mod acegen;
pub mod cov;
pub mod crash;
pub mod fuzz;
pub mod harness;
mod hash;
pub mod oracle;
pub mod pmem;
pub mod reffs;
pub mod workload;

/// Build identity embedded in reports so a repro knows which binary produced
/// a finding. Layout changes in reffs bump the second component.
pub fn build_id() -> String {
    format!("pmcl-{}+reffs-{}", env!("CARGO_PKG_VERSION"), reffs::layout::LAYOUT_VERSION)
}
