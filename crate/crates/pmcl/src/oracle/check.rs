//! Crash-state checking. For every core call the model supplies a pair of
//! legal states (just before the call, just after it returned); a crash
//! image mounted mid-call must match one of them, and an image taken at the
//! call boundary must match the post-call state. Everything else is a
//! finding, classified by how it deviates.

use std::panic::{catch_unwind, AssertUnwindSafe};

use serde::{Deserialize, Serialize};

use crate::cov::CovSet;
use crate::oracle::model::ModelFs;
use crate::oracle::snapshot::{snapshot_model, snapshot_reffs, FsSnapshot};
use crate::pmem::PmDevice;
use crate::reffs::{self, FaultConfig};
use crate::workload::{FsError, FsOp, Workload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Verdict {
    PassBefore,
    PassAfter,
    NotSynchronous,
    AtomicityFail,
    Mismatch,
    Unmountable,
    UsabilityFail,
}

impl Verdict {
    pub const ALL: [Verdict; 7] = [
        Verdict::PassBefore,
        Verdict::PassAfter,
        Verdict::NotSynchronous,
        Verdict::AtomicityFail,
        Verdict::Mismatch,
        Verdict::Unmountable,
        Verdict::UsabilityFail,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Verdict::PassBefore => "PASS_BEFORE",
            Verdict::PassAfter => "PASS_AFTER",
            Verdict::NotSynchronous => "NOT_SYNCHRONOUS",
            Verdict::AtomicityFail => "ATOMICITY_FAIL",
            Verdict::Mismatch => "MISMATCH",
            Verdict::Unmountable => "UNMOUNTABLE",
            Verdict::UsabilityFail => "USABILITY_FAIL",
        }
    }

    pub fn from_name(s: &str) -> Option<Verdict> {
        Verdict::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn is_failure(self) -> bool {
        !matches!(self, Verdict::PassBefore | Verdict::PassAfter)
    }
}

impl std::fmt::Display for Verdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// The two legal states bracketing one core call, plus the call itself and
/// the result code the model produced for it.
#[derive(Debug, Clone)]
pub struct OraclePair {
    /// Index among the core calls; crash points carry the same index.
    pub index: usize,
    /// Position among all ops (setup plus core); seeds write content.
    pub ordinal: u64,
    pub op: FsOp,
    pub result: Result<(), FsError>,
    pub before: FsSnapshot,
    pub after: FsSnapshot,
}

#[derive(Debug, Clone, Default)]
pub struct OracleSet {
    pub pairs: Vec<OraclePair>,
}

/// Run the model over a workload. Setup ops must succeed; core ops may fail
/// with a code, which the pair keeps so the live run can be held to it.
pub fn build_oracles(wl: &Workload) -> Result<OracleSet, String> {
    let mut m = ModelFs::new();
    let mut ordinal: u64 = 0;
    for op in &wl.setup {
        if let Err(e) = m.apply(op, ordinal) {
            return Err(format!("setup op {ordinal} ({op}) failed in the model: {e}"));
        }
        ordinal += 1;
    }
    let mut pairs = Vec::with_capacity(wl.core.len());
    for (index, op) in wl.core.iter().enumerate() {
        let before = snapshot_model(&m);
        let result = m.apply(op, ordinal);
        let after = snapshot_model(&m);
        pairs.push(OraclePair { index, ordinal, op: op.clone(), result, before, after });
        ordinal += 1;
    }
    Ok(OracleSet { pairs })
}

#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub verdict: Verdict,
    /// Which guarantee the verdict speaks to, e.g. "rename atomicity".
    pub check: &'static str,
    /// Observed state, empty when the image did not mount.
    pub observed: FsSnapshot,
    /// Diff lines for state verdicts, error text for mount failures.
    pub detail: Vec<String>,
}

/// Mount a crash image and judge it against the oracle pair. A mount error
/// or a panic anywhere in mount, walk, or probe is contained and verdicted
/// as unmountable.
pub fn check_state(
    dev: &mut PmDevice,
    faults: &FaultConfig,
    pair: &OraclePair,
    mid_call: bool,
    cov: &mut CovSet,
) -> CheckOutcome {
    let r = catch_unwind(AssertUnwindSafe(|| {
        let mut fs = match reffs::mount(dev, faults, cov) {
            Ok(fs) => fs,
            Err(e) => {
                return CheckOutcome {
                    verdict: Verdict::Unmountable,
                    check: "recovery integrity",
                    observed: FsSnapshot::default(),
                    detail: vec![format!("mount failed: {e}")],
                };
            }
        };
        let observed = snapshot_reffs(&mut fs);
        let (verdict, check, detail) = classify(&observed, pair, mid_call);
        if verdict.is_failure() {
            return CheckOutcome { verdict, check, observed, detail };
        }
        match probe_usability(&mut fs) {
            Ok(()) => CheckOutcome { verdict, check, observed, detail },
            Err(msg) => CheckOutcome {
                verdict: Verdict::UsabilityFail,
                check: "post-crash usability",
                observed,
                detail: vec![msg],
            },
        }
    }));
    r.unwrap_or_else(|payload| CheckOutcome {
        verdict: Verdict::Unmountable,
        check: "recovery integrity",
        observed: FsSnapshot::default(),
        detail: vec![format!("panic while mounting or walking: {}", panic_text(payload))],
    })
}

fn panic_text(payload: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "opaque panic payload".to_string()
    }
}

fn classify(
    observed: &FsSnapshot,
    pair: &OraclePair,
    mid_call: bool,
) -> (Verdict, &'static str, Vec<String>) {
    if mid_call {
        if *observed == pair.before {
            return (Verdict::PassBefore, "crash consistency", Vec::new());
        }
        if *observed == pair.after {
            return (Verdict::PassAfter, "crash consistency", Vec::new());
        }
    } else {
        if *observed == pair.after {
            return (Verdict::PassAfter, "crash consistency", Vec::new());
        }
        if *observed == pair.before {
            return (
                Verdict::NotSynchronous,
                "synchronous completion",
                vec!["returned call is not visible at its own boundary".to_string()],
            );
        }
    }
    let diff_before = observed.diff(&pair.before);
    let diff_after = observed.diff(&pair.after);
    let content_only = |lines: &[String]| {
        !lines.is_empty() && lines.iter().all(|l| l.starts_with("content "))
    };
    let mut detail = Vec::with_capacity(diff_before.len() + diff_after.len());
    detail.extend(diff_before.iter().map(|l| format!("pre: {l}")));
    detail.extend(diff_after.iter().map(|l| format!("post: {l}")));
    if content_only(&diff_before) && content_only(&diff_after) {
        (Verdict::AtomicityFail, "write atomicity", detail)
    } else {
        (Verdict::Mismatch, mismatch_check(&pair.op), detail)
    }
}

fn mismatch_check(op: &FsOp) -> &'static str {
    match op {
        FsOp::Rename { .. } => "rename atomicity",
        FsOp::Link { .. } => "link atomicity",
        FsOp::Unlink { .. } => "unlink atomicity",
        FsOp::Mkdir { .. } | FsOp::Creat { .. } | FsOp::Rmdir { .. } => "namespace durability",
        FsOp::Pwrite { .. } | FsOp::WriteFd { .. } => "data integrity",
        FsOp::Truncate { .. } | FsOp::Fallocate { .. } => "size integrity",
        FsOp::Open { .. } | FsOp::Close { .. } => "handle consistency",
    }
}

/// Exercise a passing state: create a scratch file in every directory, then
/// delete every file. Out-of-space on create is tolerated; anything else is
/// a usability failure. The caller owns rolling the mutations back.
fn probe_usability(fs: &mut reffs::Reffs) -> Result<(), String> {
    let mut stack = vec![String::new()];
    let mut dirs = Vec::new();
    let mut files = Vec::new();
    while let Some(dir) = stack.pop() {
        let names = fs
            .readdir(&dir)
            .map_err(|e| format!("probe readdir {} failed: {e}", if dir.is_empty() { "/" } else { &dir }))?;
        for name in names {
            let path = if dir.is_empty() { name } else { format!("{dir}/{name}") };
            let st = fs
                .stat(&path)
                .map_err(|e| format!("probe stat {path} failed: {e}"))?;
            if st.is_dir {
                stack.push(path);
            } else {
                files.push(path);
            }
        }
        dirs.push(dir);
    }
    dirs.sort();
    for dir in &dirs {
        let path = if dir.is_empty() { "probe-u".to_string() } else { format!("{dir}/probe-u") };
        match fs.creat(&path) {
            Ok(()) => files.push(path),
            Err(FsError::NoSpace) | Err(FsError::Exists) => {}
            Err(e) => return Err(format!("probe create {path} failed: {e}")),
        }
    }
    files.sort();
    for f in &files {
        fs.unlink(f).map_err(|e| format!("probe unlink {f} failed: {e}"))?;
    }
    Ok(())
}
