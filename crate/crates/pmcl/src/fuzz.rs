//! Coverage-guided workload generation and report triage. The fuzzer mutates
//! call sequences, runs each candidate through the full crash-state checker
//! with a subset cap, and promotes a candidate to the seed pool when it adds
//! coverage to either the pre-crash or the recovery partition. Findings are
//! grouped by lexical similarity of their reports, so one bug surfacing at
//! many crash points lands in one cluster.

use std::collections::{BTreeMap, HashSet};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::acegen::synthesize_setup;
use crate::cov::CoverageMap;
use crate::harness::{run_workload, RunError, RunOptions, RunOutcome, RunStats, DEFAULT_CAPACITY};
use crate::hash::fnv64;
use crate::oracle::{build_oracles, BugReport};
use crate::reffs::FaultConfig;
use crate::workload::{FsOp, Workload};

// ---- lexical triage ---------------------------------------------------------

/// Cosine-distance threshold for joining a cluster. Calibrated so one fault
/// seen at many crash points folds into one cluster while distinct fault
/// classes in the same campaign stay apart.
pub const DEFAULT_THETA: f64 = 0.3;

/// Lowercased alphanumeric term frequencies.
fn word_vector(text: &str) -> BTreeMap<String, f64> {
    let mut v: BTreeMap<String, f64> = BTreeMap::new();
    let lower = text.to_ascii_lowercase();
    for tok in lower.split(|c: char| !c.is_ascii_alphanumeric()) {
        if !tok.is_empty() {
            *v.entry(tok.to_string()).or_insert(0.0) += 1.0;
        }
    }
    v
}

fn cosine_distance(a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>) -> f64 {
    let dot: f64 = a.iter().filter_map(|(k, x)| b.get(k).map(|y| x * y)).sum();
    let na = a.values().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.values().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 && nb == 0.0 {
        0.0
    } else if na == 0.0 || nb == 0.0 {
        1.0
    } else {
        (1.0 - dot / (na * nb)).max(0.0)
    }
}

#[derive(Debug, Clone)]
pub struct ReportCluster {
    /// Indices into the report list, in arrival order.
    pub members: Vec<usize>,
    /// First member; its workload represents the cluster.
    pub exemplar: usize,
    centroid: BTreeMap<String, f64>,
}

/// Incremental clustering over report word vectors. Assignment is greedy
/// nearest-centroid and depends only on arrival order.
#[derive(Debug)]
pub struct Triage {
    pub theta: f64,
    pub clusters: Vec<ReportCluster>,
}

impl Triage {
    pub fn new(theta: f64) -> Self {
        Triage { theta, clusters: Vec::new() }
    }

    /// Place the report, updating the joined cluster's centroid as a running
    /// mean. Returns the cluster id.
    pub fn assign(&mut self, index: usize, report: &BugReport) -> usize {
        let v = word_vector(&report.triage_text());
        let mut best: Option<(usize, f64)> = None;
        for (ci, c) in self.clusters.iter().enumerate() {
            let d = cosine_distance(&v, &c.centroid);
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((ci, d));
            }
        }
        if let Some((ci, d)) = best {
            if d < self.theta {
                let c = &mut self.clusters[ci];
                let n = c.members.len() as f64;
                for w in c.centroid.values_mut() {
                    *w *= n / (n + 1.0);
                }
                for (k, x) in v {
                    *c.centroid.entry(k).or_insert(0.0) += x / (n + 1.0);
                }
                c.members.push(index);
                return ci;
            }
        }
        self.clusters.push(ReportCluster { members: vec![index], exemplar: index, centroid: v });
        self.clusters.len() - 1
    }
}

pub fn cluster_reports(reports: &[BugReport]) -> Vec<ReportCluster> {
    cluster_reports_with(reports, DEFAULT_THETA)
}

pub fn cluster_reports_with(reports: &[BugReport], theta: f64) -> Vec<ReportCluster> {
    let mut t = Triage::new(theta);
    for (i, r) in reports.iter().enumerate() {
        t.assign(i, r);
    }
    t.clusters
}

/// One paragraph per cluster: size, failed check, verdict, and the workload
/// of the representative report.
pub fn cluster_summary(reports: &[BugReport], clusters: &[ReportCluster]) -> String {
    let mut out = String::new();
    for (ci, c) in clusters.iter().enumerate() {
        let ex = &reports[c.exemplar];
        out.push_str(&format!(
            "cluster {ci}: {} report(s), check `{}`, verdict {}, faults {}\n",
            c.members.len(),
            ex.check,
            ex.verdict,
            ex.faults,
        ));
        for line in ex.workload.lines() {
            out.push_str("    ");
            out.push_str(line);
            out.push('\n');
        }
    }
    out
}

// ---- mutation ---------------------------------------------------------------

/// Names random ops draw from: the systematic pools plus a few fresh names so
/// mutation can wander off the beaten paths.
const NAME_POOL: [&str; 12] =
    ["A", "B", "C", "f0", "f1", "g0", "A/f2", "A/f3", "A/g2", "B/f4", "B/f5", "B/C"];
const OFFSETS: [u64; 6] = [0, 37, 64, 4095, 4096, 8192];
const LENGTHS: [u64; 6] = [1, 16, 63, 100, 4096, 5000];
const SIZES: [u64; 6] = [0, 100, 2048, 4096, 5000, 9000];
/// Longest core a mutant may grow to; crash-state counts are exponential in
/// call footprint, so fuzzing stays with short sequences.
const MAX_CORE: usize = 12;

fn pool_name(rng: &mut ChaCha8Rng) -> String {
    NAME_POOL[rng.gen_range(0..NAME_POOL.len())].to_string()
}

fn random_op(rng: &mut ChaCha8Rng) -> FsOp {
    match rng.gen_range(0..12u32) {
        0 => FsOp::Mkdir { path: pool_name(rng) },
        1 => FsOp::Creat { path: pool_name(rng) },
        2 | 3 => FsOp::Pwrite {
            path: pool_name(rng),
            offset: OFFSETS[rng.gen_range(0..OFFSETS.len())],
            len: LENGTHS[rng.gen_range(0..LENGTHS.len())],
        },
        4 => FsOp::Truncate { path: pool_name(rng), size: SIZES[rng.gen_range(0..SIZES.len())] },
        5 => FsOp::Fallocate {
            path: pool_name(rng),
            offset: OFFSETS[rng.gen_range(0..OFFSETS.len())],
            len: LENGTHS[rng.gen_range(0..LENGTHS.len())],
        },
        6 => FsOp::Link { src: pool_name(rng), dst: pool_name(rng) },
        7 => FsOp::Rename { src: pool_name(rng), dst: pool_name(rng) },
        8 => FsOp::Unlink { path: pool_name(rng) },
        9 => FsOp::Rmdir { path: pool_name(rng) },
        10 => FsOp::Open { path: pool_name(rng) },
        _ => FsOp::WriteFd {
            handle: rng.gen_range(0..3),
            offset: OFFSETS[rng.gen_range(0..OFFSETS.len())],
            len: LENGTHS[rng.gen_range(0..LENGTHS.len())],
        },
    }
}

/// Append a second descriptor on one file plus writes through both: a grow
/// through the fresh handle, then a small write through the first. The
/// systematic generator never opens the same file twice, so this motif is the
/// fuzzer's own territory.
pub(crate) fn duplicate_handle_motif(core: &mut Vec<FsOp>, rng: &mut ChaCha8Rng) {
    let path = core
        .iter()
        .flat_map(|op| op.paths())
        .find(|p| !["A", "B", "C"].contains(p))
        .map(str::to_string)
        .unwrap_or_else(|| "f0".to_string());
    let first = core.iter().filter(|op| matches!(op, FsOp::Open { .. })).count() as u64;
    core.push(FsOp::Open { path: path.clone() });
    core.push(FsOp::Open { path });
    core.push(FsOp::WriteFd {
        handle: first + 1,
        offset: 4096,
        len: LENGTHS[rng.gen_range(0..LENGTHS.len())].max(1),
    });
    core.push(FsOp::WriteFd { handle: first, offset: 0, len: 16 });
}

fn perturb(op: &mut FsOp, rng: &mut ChaCha8Rng) {
    match op {
        FsOp::Mkdir { path }
        | FsOp::Creat { path }
        | FsOp::Rmdir { path }
        | FsOp::Unlink { path }
        | FsOp::Open { path } => *path = pool_name(rng),
        FsOp::Pwrite { offset, len, .. }
        | FsOp::Fallocate { offset, len, .. }
        | FsOp::WriteFd { offset, len, .. } => {
            *offset = OFFSETS[rng.gen_range(0..OFFSETS.len())];
            *len = LENGTHS[rng.gen_range(0..LENGTHS.len())];
        }
        FsOp::Truncate { size, .. } => *size = SIZES[rng.gen_range(0..SIZES.len())],
        FsOp::Link { src, dst } | FsOp::Rename { src, dst } => {
            if rng.gen_bool(0.5) {
                *src = pool_name(rng);
            } else {
                *dst = pool_name(rng);
            }
        }
        FsOp::Close { handle } => *handle = rng.gen_range(0..3),
    }
}

/// Attach a synthesized setup and dry-run it in the model. Core calls may
/// legally fail at runtime; a candidate dies only when its setup cannot be
/// satisfied.
fn validate(core: Vec<FsOp>) -> Option<Workload> {
    if core.is_empty() || core.len() > MAX_CORE {
        return None;
    }
    let wl = Workload { setup: synthesize_setup(&core), core };
    build_oracles(&wl).ok()?;
    Some(wl)
}

/// One mutation of the parent core: insert, delete, swap, argument
/// perturbation, a duplicate-descriptor motif, or an appended call. Invalid
/// offspring are repaired by setup synthesis or discarded.
pub fn mutate(parent: &[FsOp], rng: &mut ChaCha8Rng) -> Option<Workload> {
    for _ in 0..4 {
        let mut core = parent.to_vec();
        match rng.gen_range(0..6u32) {
            0 => {
                let at = rng.gen_range(0..=core.len());
                core.insert(at, random_op(rng));
            }
            1 => {
                if core.len() > 1 {
                    let at = rng.gen_range(0..core.len());
                    core.remove(at);
                }
            }
            2 => {
                if core.len() >= 2 {
                    let a = rng.gen_range(0..core.len());
                    let b = rng.gen_range(0..core.len());
                    core.swap(a, b);
                }
            }
            3 => {
                let at = rng.gen_range(0..core.len());
                perturb(&mut core[at], rng);
            }
            4 => duplicate_handle_motif(&mut core, rng),
            _ => core.push(random_op(rng)),
        }
        if let Some(wl) = validate(core) {
            return Some(wl);
        }
    }
    None
}

/// A fresh workload with no parent, for bootstrapping an empty seed pool.
pub fn from_scratch(rng: &mut ChaCha8Rng) -> Option<Workload> {
    for _ in 0..4 {
        let n = rng.gen_range(1..=3usize);
        let core: Vec<FsOp> = (0..n).map(|_| random_op(rng)).collect();
        if let Some(wl) = validate(core) {
            return Some(wl);
        }
    }
    None
}

// ---- the loop -----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Seed {
    pub workload: Workload,
    /// Coverage the workload achieved when it was promoted; re-running it
    /// reproduces this exactly.
    pub signature: CoverageMap,
    /// Times this seed has been chosen as a mutation parent. Selection is
    /// uniform; the counter is bookkeeping for anything smarter.
    pub energy: u64,
}

#[derive(Debug, Clone)]
pub struct FuzzOptions {
    /// Number of candidate workloads to generate (executed or discarded).
    pub budget: usize,
    pub faults: FaultConfig,
    pub cap: Option<usize>,
    pub threads: usize,
    pub rng_seed: u64,
    pub capacity: usize,
    pub theta: f64,
}

impl Default for FuzzOptions {
    fn default() -> Self {
        FuzzOptions {
            budget: 200,
            faults: FaultConfig::none(),
            cap: Some(2),
            threads: 4,
            rng_seed: 1,
            capacity: DEFAULT_CAPACITY,
            theta: DEFAULT_THETA,
        }
    }
}

/// Progress snapshot handed to the campaign's tick callback after each batch.
#[derive(Debug, Clone, Copy)]
pub struct FuzzTick {
    pub executed: usize,
    pub budget: usize,
    pub corpus: usize,
    pub coverage_edges: usize,
    pub reports: usize,
    pub clusters: usize,
}

#[derive(Debug, Default)]
pub struct FuzzOutcome {
    pub executed: usize,
    pub discarded: usize,
    pub corpus: Vec<Seed>,
    pub reports: Vec<BugReport>,
    pub clusters: Vec<ReportCluster>,
    pub stats: RunStats,
    pub coverage: CoverageMap,
    pub errors: Vec<String>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn par_run(
    jobs: &[Option<Workload>],
    opts: &RunOptions,
    threads: usize,
) -> Vec<Option<Result<RunOutcome, RunError>>> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<RunOutcome, RunError>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.max(1).min(jobs.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                if let Some(wl) = &jobs[i] {
                    let r = run_workload(wl, opts);
                    slots.lock().unwrap()[i] = Some(r);
                }
            });
        }
    });
    slots.into_inner().unwrap()
}

/// Run a fuzzing campaign. Candidates are planned in batches of `threads`,
/// executed in parallel, and merged in planning order, so the whole campaign
/// is a pure function of its options. The seed pool starts empty unless
/// `seeds` provides parents.
pub fn fuzz_loop(
    opts: &FuzzOptions,
    seeds: &[Workload],
    mut tick: impl FnMut(&FuzzTick, &[BugReport], &[ReportCluster]),
) -> FuzzOutcome {
    let run_opts =
        RunOptions {
            capacity: opts.capacity,
            cap: opts.cap,
            faults: opts.faults.clone(),
            boundary_only: false,
        };
    let mut out = FuzzOutcome::default();
    let mut triage = Triage::new(opts.theta);
    let mut fold: HashSet<u64> = HashSet::new();

    for wl in seeds {
        out.corpus.push(Seed {
            workload: wl.clone(),
            signature: CoverageMap::new(),
            energy: 0,
        });
    }

    let width = opts.threads.max(1);
    let mut planned = 0usize;
    while planned < opts.budget {
        let batch = width.min(opts.budget - planned);
        let mut jobs: Vec<Option<Workload>> = Vec::with_capacity(batch);
        for j in 0..batch {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.rng_seed ^ splitmix((planned + j) as u64));
            let wl = if out.corpus.is_empty() {
                from_scratch(&mut rng)
            } else {
                let pick = rng.gen_range(0..out.corpus.len());
                out.corpus[pick].energy += 1;
                mutate(&out.corpus[pick].workload.core.clone(), &mut rng)
            };
            jobs.push(wl);
        }
        let results = par_run(&jobs, &run_opts, width);
        for (job, res) in jobs.into_iter().zip(results) {
            match (job, res) {
                (None, _) => out.discarded += 1,
                (Some(wl), Some(Ok(run))) => {
                    out.executed += 1;
                    let promote = out.coverage.would_add(&run.coverage);
                    out.coverage.merge(&run.coverage);
                    out.stats.absorb(&run.stats);
                    for report in run.reports {
                        if fold.insert(fnv64(report.fold_text().as_bytes())) {
                            triage.assign(out.reports.len(), &report);
                            out.reports.push(report);
                        } else {
                            out.stats.reports_folded += 1;
                        }
                    }
                    if promote {
                        out.corpus.push(Seed {
                            workload: wl,
                            signature: run.coverage,
                            energy: 0,
                        });
                    }
                }
                (Some(wl), Some(Err(e))) => {
                    out.executed += 1;
                    out.errors.push(format!("workload {}: {e}", wl.id_hex()));
                }
                (Some(_), None) => unreachable!("worker skipped a planned job"),
            }
        }
        planned += batch;
        tick(
            &FuzzTick {
                executed: out.executed,
                budget: opts.budget,
                corpus: out.corpus.len(),
                coverage_edges: out.coverage.total(),
                reports: out.reports.len(),
                clusters: triage.clusters.len(),
            },
            &out.reports,
            &triage.clusters,
        );
    }
    out.clusters = triage.clusters;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::Verdict;
    use crate::reffs::FaultId;

    #[test]
    fn cosine_distance_basics() {
        let a = word_vector("alpha beta beta");
        let b = word_vector("Alpha BETA beta.");
        let c = word_vector("gamma delta");
        assert!(cosine_distance(&a, &b) < 1e-12);
        assert!((cosine_distance(&a, &c) - 1.0).abs() < 1e-12);
        assert_eq!(cosine_distance(&word_vector(""), &word_vector("")), 0.0);
        assert_eq!(cosine_distance(&a, &word_vector("")), 1.0);
    }

    fn report_with(faults: &str, check: &str, op: &str, workload: &str) -> BugReport {
        BugReport {
            build: "test".into(),
            faults: faults.into(),
            verdict: Verdict::Mismatch,
            check: check.into(),
            call: 0,
            mid_call: true,
            op: op.into(),
            workload: workload.into(),
            observed: vec![],
            expected_before: vec![],
            expected_after: vec![],
            detail: vec![],
            workload_id: "0".into(),
            point_seq: 0,
            subset: vec![],
            cap: None,
        }
    }

    #[test]
    fn identical_reports_share_a_cluster_and_partition_holds() {
        let r = report_with("F-X", "rename atomicity", "rename f g", "rename f g\n");
        let reports = vec![r.clone(), r.clone(), r];
        let clusters = cluster_reports(&reports);
        assert_eq!(clusters.len(), 1);
        assert_eq!(clusters[0].members, vec![0, 1, 2]);
        let mut seen = vec![false; reports.len()];
        for c in &clusters {
            for &m in &c.members {
                assert!(!seen[m], "report {m} in two clusters");
                seen[m] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn distinct_fault_classes_get_distinct_clusters() {
        let a = report_with(
            "F-RENAME-INPLACE",
            "rename atomicity",
            "rename f0 g0",
            "creat f0\npwrite f0 0 4096\ncreat g0\npwrite g0 0 4096\nsetup-done\nrename f0 g0\n",
        );
        let b = report_with(
            "F-MISSING-FENCE-WRITE",
            "write atomicity",
            "pwrite f0 37 63",
            "creat f0\npwrite f0 0 4096\nsetup-done\npwrite f0 37 63\n",
        );
        let clusters = cluster_reports(&[a, b]);
        assert_eq!(clusters.len(), 2);
    }

    #[test]
    fn mutants_always_carry_a_satisfiable_setup() {
        let parent = vec![FsOp::Creat { path: "f0".into() }];
        let mut produced = 0;
        for i in 0..300u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(i);
            if let Some(wl) = mutate(&parent, &mut rng) {
                produced += 1;
                assert!(!wl.core.is_empty());
                assert!(build_oracles(&wl).is_ok());
            }
        }
        assert!(produced > 250, "only {produced}/300 mutants survived");
    }

    #[test]
    fn duplicate_handle_motif_exposes_the_stale_size_fault() {
        let mut core = vec![FsOp::Pwrite { path: "f0".into(), offset: 0, len: 100 }];
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        duplicate_handle_motif(&mut core, &mut rng);
        let wl = validate(core).unwrap();
        let opts = RunOptions {
            cap: Some(2),
            faults: FaultConfig::single(FaultId::HandleStaleSize),
            ..RunOptions::default()
        };
        let out = run_workload(&wl, &opts).unwrap();
        assert!(
            out.reports.iter().any(|r| r.verdict == Verdict::Mismatch),
            "verdicts: {:?}",
            out.stats.verdicts
        );
        // The same workload on the fixed build is clean.
        let clean = run_workload(&wl, &RunOptions { cap: Some(2), ..RunOptions::default() }).unwrap();
        assert!(clean.reports.is_empty());
    }

    #[test]
    fn empty_seed_pool_bootstraps_and_stays_deterministic() {
        let opts = FuzzOptions { budget: 24, threads: 4, ..FuzzOptions::default() };
        let a = fuzz_loop(&opts, &[], |_, _, _| {});
        let b = fuzz_loop(&opts, &[], |_, _, _| {});
        assert_eq!(a.executed + a.discarded, 24);
        assert!(!a.corpus.is_empty(), "no seed promoted from scratch");
        assert!(a.reports.is_empty(), "fixed build produced findings");
        assert_eq!(a.executed, b.executed);
        assert_eq!(a.coverage, b.coverage);
        assert_eq!(
            a.corpus.iter().map(|s| s.workload.to_text()).collect::<Vec<_>>(),
            b.corpus.iter().map(|s| s.workload.to_text()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn promoted_seeds_reproduce_their_signatures() {
        let opts = FuzzOptions { budget: 16, threads: 2, ..FuzzOptions::default() };
        let out = fuzz_loop(&opts, &[], |_, _, _| {});
        let run_opts = RunOptions { cap: opts.cap, ..RunOptions::default() };
        for seed in out.corpus.iter().take(3) {
            let rerun = run_workload(&seed.workload, &run_opts).unwrap();
            assert_eq!(rerun.coverage, seed.signature);
        }
    }

    #[test]
    fn fuzzing_a_faulty_build_finds_and_clusters_reports() {
        let opts = FuzzOptions {
            budget: 60,
            threads: 4,
            faults: FaultConfig::single(FaultId::RenameInplace),
            rng_seed: 3,
            ..FuzzOptions::default()
        };
        let seed = Workload::parse("creat f0\ncreat g0\nsetup-done\nrename f0 g0\n").unwrap();
        let mut ticks = 0;
        let out = fuzz_loop(&opts, &[seed], |_, _, _| ticks += 1);
        assert!(ticks > 0);
        assert!(!out.reports.is_empty(), "no findings in {} runs", out.executed);
        assert!(!out.clusters.is_empty());
        let summary = cluster_summary(&out.reports, &out.clusters);
        assert!(summary.contains("cluster 0:"));
        assert!(summary.contains("rename"));
    }
}
