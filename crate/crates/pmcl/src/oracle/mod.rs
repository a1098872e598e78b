//! The checking side of the laboratory: an independent in-memory model of
//! the expected file-system semantics, canonical state snapshots, the
//! crash-state checker that compares a mounted crash image against the
//! model's before/after states, and the bug-report format.

pub mod check;
pub mod model;
pub mod report;
pub mod snapshot;

pub use check::{build_oracles, check_state, CheckOutcome, OraclePair, OracleSet, Verdict};
pub use model::ModelFs;
pub use report::BugReport;
pub use snapshot::{snapshot_model, snapshot_reffs, FsSnapshot, SnapNode};
