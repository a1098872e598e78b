//! The run engine. One workload run means: execute the workload once on a
//! traced device, enumerate every crash point from the trace, reconstruct
//! the persistent image at each point, materialize every admissible subset
//! of the in-flight writes, and judge each resulting state against the
//! model's oracles. Campaigns fan workloads out over threads and merge
//! results in workload order, so output never depends on scheduling.

use std::collections::{BTreeMap, HashSet};
use std::io::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;
use thiserror::Error;

use crate::cov::{CovSet, CoverageMap};
use crate::crash::{
    coalesce, enumerate_crash_points, materialize, state_digest, CrashEnumError, ImageCursor,
    SubsetIter,
};
use crate::hash::fnv64;
use crate::oracle::{build_oracles, check_state, BugReport, CheckOutcome, OracleSet, Verdict};
use crate::pmem::{PmDevice, PmemError, Trace};
use crate::reffs::{self, FaultConfig};
use crate::workload::Workload;

pub const LINE_SIZE: usize = 64;
pub const DEFAULT_CAPACITY: usize = 1 << 20;

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub capacity: usize,
    /// Largest in-flight subset size materialized per crash point; `None`
    /// enumerates exhaustively.
    pub cap: Option<usize>,
    pub faults: FaultConfig,
    /// Check only syscall-boundary crash points, skipping the mid-call
    /// points. This is the weaker discipline older checkers used; it exists
    /// to measure what mid-call enumeration buys.
    pub boundary_only: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            capacity: DEFAULT_CAPACITY,
            cap: None,
            faults: FaultConfig::none(),
            boundary_only: false,
        }
    }
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error("oracle: {0}")]
    Oracle(String),
    #[error("device mount during recording: {0}")]
    RecordMount(String),
    #[error("call {call} ({op}) diverged: device {device}, model {model}")]
    Divergence { call: usize, op: String, device: String, model: String },
    #[error(transparent)]
    Pmem(#[from] PmemError),
    #[error(transparent)]
    Enumeration(#[from] CrashEnumError),
    #[error("repro: {0}")]
    Repro(String),
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct RunStats {
    pub points: usize,
    pub mid_points: usize,
    pub boundary_points: usize,
    pub states_checked: u64,
    pub states_deduped: u64,
    pub reports_folded: u64,
    pub max_units: usize,
    pub unit_total: u64,
    pub verdicts: BTreeMap<String, u64>,
}

impl RunStats {
    pub fn absorb(&mut self, other: &RunStats) {
        self.points += other.points;
        self.mid_points += other.mid_points;
        self.boundary_points += other.boundary_points;
        self.states_checked += other.states_checked;
        self.states_deduped += other.states_deduped;
        self.reports_folded += other.reports_folded;
        self.max_units = self.max_units.max(other.max_units);
        self.unit_total += other.unit_total;
        for (k, v) in &other.verdicts {
            *self.verdicts.entry(k.clone()).or_insert(0) += v;
        }
    }

    pub fn mean_units(&self) -> f64 {
        if self.points == 0 {
            0.0
        } else {
            self.unit_total as f64 / self.points as f64
        }
    }
}

#[derive(Debug, Default)]
pub struct RunOutcome {
    pub reports: Vec<BugReport>,
    pub stats: RunStats,
    pub coverage: CoverageMap,
}

fn verdict_edge(v: Verdict) -> &'static str {
    match v {
        Verdict::PassBefore => "verdict.PASS_BEFORE",
        Verdict::PassAfter => "verdict.PASS_AFTER",
        Verdict::NotSynchronous => "verdict.NOT_SYNCHRONOUS",
        Verdict::AtomicityFail => "verdict.ATOMICITY_FAIL",
        Verdict::Mismatch => "verdict.MISMATCH",
        Verdict::Unmountable => "verdict.UNMOUNTABLE",
        Verdict::UsabilityFail => "verdict.USABILITY_FAIL",
    }
}

/// Execute the workload once against the device implementation, with each
/// core call bracketed by syscall markers, and hold every call to the
/// model's result code. Returns the trace and the oracles.
fn record(
    wl: &Workload,
    opts: &RunOptions,
    cov: &mut CovSet,
) -> Result<(Trace, OracleSet), RunError> {
    let oracles = build_oracles(wl).map_err(RunError::Oracle)?;
    let mut dev = PmDevice::new(opts.capacity, LINE_SIZE)?;
    reffs::mkfs(&mut dev, opts.faults.checksum_mode).map_err(|e| RunError::RecordMount(e.to_string()))?;
    {
        let mut fs = reffs::mount(&mut dev, &opts.faults, cov)
            .map_err(|e| RunError::RecordMount(e.to_string()))?;
        let mut ordinal: u64 = 0;
        for op in &wl.setup {
            let r = fs.apply(op, ordinal);
            if r.is_err() {
                // The model already accepted this setup; the device cannot
                // legally disagree on a fault-free prefix.
                return Err(RunError::Divergence {
                    call: ordinal as usize,
                    op: op.to_string(),
                    device: format!("{r:?}"),
                    model: "Ok(())".to_string(),
                });
            }
            ordinal += 1;
        }
        // Setup is preparation, not test surface: retire everything it left
        // dirty or in flight so the first core call starts from a quiet
        // device even under fence-dropping faults.
        fs.dev.quiesce()?;
        for (i, op) in wl.core.iter().enumerate() {
            fs.dev.syscall_begin(i as u64)?;
            let r = fs.apply(op, ordinal);
            fs.dev.syscall_end(i as u64)?;
            let expect = oracles.pairs[i].result;
            if r != expect {
                return Err(RunError::Divergence {
                    call: i,
                    op: op.to_string(),
                    device: format!("{r:?}"),
                    model: format!("{expect:?}"),
                });
            }
            ordinal += 1;
        }
    }
    Ok((dev.take_trace(), oracles))
}

/// Run one workload end to end and judge every reachable crash state.
pub fn run_workload(wl: &Workload, opts: &RunOptions) -> Result<RunOutcome, RunError> {
    let mut coverage = CoverageMap::default();
    let (trace, oracles) = record(wl, opts, &mut coverage.pre_crash)?;
    let points = enumerate_crash_points(&trace)?;
    let mut cursor = ImageCursor::new(&trace);
    let mut check_dev = PmDevice::new(opts.capacity, LINE_SIZE)?;
    let mut stats = RunStats::default();
    let mut reports: Vec<BugReport> = Vec::new();
    let mut folded: HashSet<u64> = HashSet::new();

    for point in &points {
        if opts.boundary_only && point.mid_call {
            continue;
        }
        let units = coalesce(&point.in_flight);
        stats.points += 1;
        if point.mid_call {
            stats.mid_points += 1;
        } else {
            stats.boundary_points += 1;
        }
        stats.max_units = stats.max_units.max(units.len());
        stats.unit_total += units.len() as u64;
        let image = cursor.advance_to(point.seq)?;
        check_dev.load_image(image)?;
        let pair = &oracles.pairs[point.syscall as usize];
        let mut seen: HashSet<u64> = HashSet::new();
        for subset in SubsetIter::new(&units, LINE_SIZE, opts.cap, point.mid_call) {
            check_dev.begin_undo()?;
            materialize(&mut check_dev, &units, &subset)?;
            let digest = state_digest(&check_dev, &units);
            if !seen.insert(digest) {
                stats.states_deduped += 1;
                check_dev.rollback_undo()?;
                continue;
            }
            let outcome =
                check_state(&mut check_dev, &opts.faults, pair, point.mid_call, &mut coverage.recovery);
            check_dev.rollback_undo()?;
            stats.states_checked += 1;
            coverage.recovery.hit(verdict_edge(outcome.verdict));
            *stats.verdicts.entry(outcome.verdict.name().to_string()).or_insert(0) += 1;
            if outcome.verdict.is_failure() {
                let report = assemble_report(wl, opts, pair, point.syscall, point.mid_call, point.seq, &subset, outcome);
                if folded.insert(fnv64(report.fold_text().as_bytes())) {
                    reports.push(report);
                } else {
                    stats.reports_folded += 1;
                }
            }
        }
    }
    Ok(RunOutcome { reports, stats, coverage })
}

#[allow(clippy::too_many_arguments)]
fn assemble_report(
    wl: &Workload,
    opts: &RunOptions,
    pair: &crate::oracle::OraclePair,
    call: u64,
    mid_call: bool,
    point_seq: u64,
    subset: &[usize],
    outcome: CheckOutcome,
) -> BugReport {
    BugReport {
        build: crate::build_id(),
        faults: opts.faults.describe(),
        verdict: outcome.verdict,
        check: outcome.check.to_string(),
        call,
        mid_call,
        op: pair.op.to_string(),
        workload: wl.to_text(),
        observed: outcome.observed.render_lines(),
        expected_before: pair.before.render_lines(),
        expected_after: pair.after.render_lines(),
        detail: outcome.detail,
        workload_id: wl.id_hex(),
        point_seq,
        subset: subset.to_vec(),
        cap: opts.cap,
    }
}

/// Re-execute one report's exact crash coordinates and return the verdict
/// the state produces now.
pub fn repro(report: &BugReport, capacity: usize) -> Result<CheckOutcome, RunError> {
    let wl = Workload::parse(&report.workload)
        .map_err(|e| RunError::Repro(format!("workload text: {e}")))?;
    if wl.id_hex() != report.workload_id {
        return Err(RunError::Repro(format!(
            "workload id {} does not match text (expected {})",
            report.workload_id,
            wl.id_hex()
        )));
    }
    let faults = FaultConfig::parse(&report.faults).map_err(RunError::Repro)?;
    let opts = RunOptions { capacity, cap: report.cap, faults, boundary_only: false };
    let mut cov = CovSet::new();
    let (trace, oracles) = record(&wl, &opts, &mut cov)?;
    let points = enumerate_crash_points(&trace)?;
    let point = points
        .iter()
        .find(|p| p.seq == report.point_seq && p.mid_call == report.mid_call)
        .ok_or_else(|| RunError::Repro(format!("no crash point at seq {}", report.point_seq)))?;
    if point.syscall != report.call {
        return Err(RunError::Repro(format!(
            "crash point at seq {} belongs to call {}, report says {}",
            report.point_seq, point.syscall, report.call
        )));
    }
    let units = coalesce(&point.in_flight);
    if report.subset.iter().any(|&i| i >= units.len()) {
        return Err(RunError::Repro(format!(
            "subset {:?} out of range for {} units",
            report.subset,
            units.len()
        )));
    }
    let mut cursor = ImageCursor::new(&trace);
    let image = cursor.advance_to(point.seq)?;
    let mut dev = PmDevice::new(opts.capacity, LINE_SIZE)?;
    dev.load_image(image)?;
    dev.begin_undo()?;
    materialize(&mut dev, &units, &report.subset)?;
    let pair = &oracles.pairs[point.syscall as usize];
    let outcome = check_state(&mut dev, &opts.faults, pair, point.mid_call, &mut cov);
    dev.rollback_undo()?;
    Ok(outcome)
}

// ---- campaigns -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CampaignOptions {
    pub run: RunOptions,
    pub threads: usize,
}

impl Default for CampaignOptions {
    fn default() -> Self {
        CampaignOptions { run: RunOptions::default(), threads: 4 }
    }
}

#[derive(Debug, Default)]
pub struct CampaignResult {
    pub workloads: usize,
    pub reports: Vec<BugReport>,
    pub stats: RunStats,
    pub coverage: CoverageMap,
    /// Workloads that could not be run at all, with their errors.
    pub errors: Vec<String>,
}

/// Run a batch of workloads across threads. Results merge in workload
/// order, so the outcome is identical for any thread count.
pub fn run_campaign(workloads: &[Workload], opts: &CampaignOptions) -> CampaignResult {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunOutcome, RunError>>>> =
        Mutex::new((0..workloads.len()).map(|_| None).collect());
    let threads = opts.threads.max(1).min(workloads.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= workloads.len() {
                    break;
                }
                let r = run_workload(&workloads[i], &opts.run);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let mut result = CampaignResult { workloads: workloads.len(), ..Default::default() };
    let mut folded: HashSet<u64> = HashSet::new();
    for (i, slot) in slots.into_inner().unwrap().into_iter().enumerate() {
        match slot.expect("every index was claimed by a worker") {
            Ok(out) => {
                result.stats.absorb(&out.stats);
                result.coverage.merge(&out.coverage);
                for report in out.reports {
                    if folded.insert(fnv64(report.fold_text().as_bytes())) {
                        result.reports.push(report);
                    } else {
                        result.stats.reports_folded += 1;
                    }
                }
            }
            Err(e) => {
                result.errors.push(format!("workload {i} ({}): {e}", workloads[i].id_hex()));
            }
        }
    }
    result
}

// ---- output persistence -----------------------------------------------------

/// Descriptive context for a campaign's outputs.
#[derive(Debug, Clone, Serialize)]
pub struct CampaignMeta {
    pub source: String,
    pub faults: String,
    pub cap: Option<usize>,
    /// Clustering threshold used for clusters.json.
    pub theta: f64,
}

impl CampaignMeta {
    pub fn new(source: impl Into<String>, faults: String, cap: Option<usize>) -> CampaignMeta {
        CampaignMeta { source: source.into(), faults, cap, theta: crate::fuzz::DEFAULT_THETA }
    }
}

/// Write the full output tree: one text report per finding, a manifest, a
/// cluster map, and aggregate statistics. Everything written is a pure
/// function of the campaign result; no timestamps, no timing.
pub fn write_outputs(
    dir: &Path,
    res: &CampaignResult,
    meta: &CampaignMeta,
) -> std::io::Result<()> {
    std::fs::create_dir_all(dir.join("reports"))?;
    let mut manifest_reports = Vec::new();
    for (i, report) in res.reports.iter().enumerate() {
        let file = format!("reports/{i:04}.txt");
        std::fs::write(dir.join(&file), report.to_text())?;
        manifest_reports.push(serde_json::json!({
            "file": file,
            "verdict": report.verdict.name(),
            "check": report.check,
            "workload_id": report.workload_id,
            "call": report.call,
            "mid_call": report.mid_call,
        }));
    }
    let manifest = serde_json::json!({
        "build": crate::build_id(),
        "source": meta.source,
        "faults": meta.faults,
        "cap": meta.cap,
        "theta": meta.theta,
        "workloads": res.workloads,
        "errors": res.errors,
        "reports": manifest_reports,
    });
    write_json(&dir.join("manifest.json"), &manifest)?;

    let clusters = crate::fuzz::cluster_reports_with(&res.reports, meta.theta);
    let cluster_rows: Vec<serde_json::Value> = clusters
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            serde_json::json!({
                "cluster": ci,
                "check": res.reports[c.exemplar].check,
                "verdict": res.reports[c.exemplar].verdict.name(),
                "exemplar": format!("reports/{:04}.txt", c.exemplar),
                "members": c.members.iter().map(|&m| format!("reports/{m:04}.txt")).collect::<Vec<_>>(),
            })
        })
        .collect();
    write_json(&dir.join("clusters.json"), &serde_json::json!({ "clusters": cluster_rows }))?;

    let stats = serde_json::json!({
        "stats": res.stats,
        "mean_units": res.stats.mean_units(),
        "coverage": {
            "pre_crash_edges": res.coverage.pre_crash.len(),
            "recovery_edges": res.coverage.recovery.len(),
        },
        "clusters": clusters.len(),
        "reports": res.reports.len(),
    });
    write_json(&dir.join("stats.json"), &stats)
}

fn write_json(path: &Path, value: &serde_json::Value) -> std::io::Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::FsOp;

    fn wl(text: &str) -> Workload {
        Workload::parse(text).unwrap()
    }

    #[test]
    fn fixed_build_passes_a_small_workload() {
        let w = wl("mkdir A\ncreat A/f\nsetup-done\npwrite A/f 0 100\nrename A/f A/g\nunlink A/g\n");
        let out = run_workload(&w, &RunOptions::default()).unwrap();
        assert!(out.reports.is_empty(), "unexpected findings: {:#?}", out.reports);
        assert!(out.stats.points > 0);
        assert!(out.stats.mid_points > 0);
        assert_eq!(out.stats.boundary_points, 3);
        assert!(out.stats.states_checked > out.stats.points as u64);
        assert!(out.coverage.recovery.contains("verdict.PASS_AFTER"));
    }

    #[test]
    fn divergence_is_a_run_error_not_a_finding() {
        // The model rejects this setup, so the run cannot start.
        let w = wl("creat missing/f\nsetup-done\nmkdir A\n");
        match run_workload(&w, &RunOptions::default()) {
            Err(RunError::Oracle(msg)) => assert!(msg.contains("setup")),
            other => panic!("expected oracle error, got {other:?}"),
        }
    }

    #[test]
    fn faulty_rename_yields_a_mismatch_report() {
        // The source must be distinguishable from the overwritten target, or
        // the fault window (source name already gone, target still the old
        // inode) collapses into the after state.
        let w = wl("creat f\npwrite f 0 100\ncreat g\nsetup-done\nrename f g\n");
        let mut opts = RunOptions::default();
        opts.faults = FaultConfig::single(crate::reffs::FaultId::RenameInplace);
        let out = run_workload(&w, &opts).unwrap();
        assert!(
            out.reports.iter().any(|r| r.verdict == Verdict::Mismatch),
            "verdicts seen: {:?}",
            out.stats.verdicts
        );
        let r = out.reports.iter().find(|r| r.verdict == Verdict::Mismatch).unwrap();
        assert_eq!(r.check, "rename atomicity");
        assert_eq!(r.faults, "F-RENAME-INPLACE");
        // The report's coordinates replay to the same verdict.
        let again = repro(r, DEFAULT_CAPACITY).unwrap();
        assert_eq!(again.verdict, r.verdict);
        assert_eq!(again.check, r.check);
    }

    #[test]
    fn report_text_files_roundtrip_through_repro(){
        let w = wl("creat f\nsetup-done\nlink f g\n");
        let mut opts = RunOptions::default();
        opts.faults = FaultConfig::single(crate::reffs::FaultId::LinkInplace);
        let out = run_workload(&w, &opts).unwrap();
        assert!(!out.reports.is_empty());
        let text = out.reports[0].to_text();
        let parsed = BugReport::from_text(&text).unwrap();
        let outcome = repro(&parsed, DEFAULT_CAPACITY).unwrap();
        assert_eq!(outcome.verdict, parsed.verdict);
    }

    #[test]
    fn campaign_merges_deterministically_across_thread_counts() {
        let workloads: Vec<Workload> = crate::acegen::generate_seq1()
            .into_iter()
            .filter(|w| matches!(w.core[0], FsOp::Rename { .. } | FsOp::Link { .. }))
            .collect();
        let mut opts = CampaignOptions::default();
        opts.run.faults = FaultConfig::single(crate::reffs::FaultId::RenameStaleOld);
        opts.threads = 1;
        let a = run_campaign(&workloads, &opts);
        opts.threads = 4;
        let b = run_campaign(&workloads, &opts);
        let texts = |r: &CampaignResult| {
            r.reports.iter().map(|x| x.to_text()).collect::<Vec<_>>()
        };
        assert_eq!(texts(&a), texts(&b));
        assert_eq!(a.stats.states_checked, b.stats.states_checked);
        assert_eq!(a.coverage.total(), b.coverage.total());
        assert!(a.errors.is_empty());
    }

    #[test]
    fn outputs_are_deterministic_files() {
        let w = vec![wl("creat f\npwrite f 0 100\ncreat g\nsetup-done\nrename f g\n")];
        let mut opts = CampaignOptions::default();
        opts.run.faults = FaultConfig::single(crate::reffs::FaultId::RenameInplace);
        let res = run_campaign(&w, &opts);
        assert!(!res.reports.is_empty());
        let meta = CampaignMeta::new("test", opts.run.faults.describe(), None);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        write_outputs(d1.path(), &res, &meta).unwrap();
        write_outputs(d2.path(), &res, &meta).unwrap();
        for name in ["manifest.json", "clusters.json", "stats.json", "reports/0000.txt"] {
            let a = std::fs::read(d1.path().join(name)).unwrap();
            let b = std::fs::read(d2.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between runs");
            assert!(!a.is_empty());
        }
    }
}
