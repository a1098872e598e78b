//! Command-line front end. Campaigns write a deterministic output tree
//! (manifest, per-finding report files, cluster map, stats); exit status is
//! 0 when no bugs were found, 1 when at least one report was filed, 2 on a
//! harness failure.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use pmcl::acegen;
use pmcl::fuzz::{self, FuzzOptions};
use pmcl::harness::{
    repro, run_campaign, write_outputs, CampaignMeta, CampaignOptions, CampaignResult,
    RunOptions, DEFAULT_CAPACITY,
};
use pmcl::oracle::BugReport;
use pmcl::reffs::{FaultConfig, FaultId};
use pmcl::workload::Workload;

#[derive(Parser)]
#[command(
    name = "pmcl",
    version,
    about = "Crash-consistency lab for a persistent-memory file system"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct CommonRun {
    /// Fault build: comma-separated fault names, `all`, or `none`.
    #[arg(long, default_value = "none", value_parser = parse_faults)]
    faults: FaultConfig,
    /// Largest in-flight subset size per crash point. ace and run are
    /// exhaustive without it; fuzz defaults to 2.
    #[arg(long)]
    cap: Option<usize>,
    /// Worker threads.
    #[arg(short = 'j', long = "jobs", default_value_t = 4)]
    jobs: usize,
    /// Device capacity in bytes.
    #[arg(long, default_value_t = DEFAULT_CAPACITY)]
    capacity: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Exhaustive campaign over every length-N workload.
    Ace {
        /// Core sequence length (1, 2, or 3).
        #[arg(long)]
        seq: usize,
        /// Restrict the operation universe to pwrite/link/unlink/rename.
        #[arg(long)]
        metadata_only: bool,
        #[command(flatten)]
        common: CommonRun,
        /// Output directory.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Coverage-guided fuzzing campaign.
    Fuzz {
        /// Candidate workloads to generate (executed or discarded).
        #[arg(long)]
        budget: usize,
        /// RNG seed. The campaign is deterministic given seed and --jobs.
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Cosine-distance threshold for report clustering.
        #[arg(long, default_value_t = fuzz::DEFAULT_THETA)]
        theta: f64,
        /// Workload files seeding the corpus (default: start empty).
        #[arg(long = "seed-file")]
        seed_files: Vec<PathBuf>,
        #[command(flatten)]
        common: CommonRun,
        /// Output directory.
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Run workloads from files.
    Run {
        /// Workload files, one workload per file.
        #[arg(required = true)]
        files: Vec<PathBuf>,
        #[command(flatten)]
        common: CommonRun,
        /// Output directory; without it, findings print to stdout.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Re-execute the crash state recorded in bug report files.
    Repro {
        /// Report files as written under an output directory's reports/.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Device capacity in bytes; must match the original run.
        #[arg(long, default_value_t = DEFAULT_CAPACITY)]
        capacity: usize,
    },
}

fn parse_faults(s: &str) -> Result<FaultConfig, String> {
    if s.trim() == "all" {
        let mut c = FaultConfig::none();
        for f in FaultId::ALL {
            c.enable(f);
        }
        return Ok(c);
    }
    FaultConfig::parse(s)
}

fn campaign_options(common: &CommonRun, cap: Option<usize>) -> CampaignOptions {
    CampaignOptions {
        run: RunOptions {
            capacity: common.capacity,
            cap,
            faults: common.faults.clone(),
            boundary_only: false,
        },
        threads: common.jobs,
    }
}

/// Persist the tree, echo the headline numbers, and fail on partial
/// campaign errors (they are recorded in the manifest first).
fn finish_campaign(
    out: &PathBuf,
    res: &CampaignResult,
    meta: &CampaignMeta,
) -> anyhow::Result<bool> {
    write_outputs(out, res, meta)
        .with_context(|| format!("writing outputs under {}", out.display()))?;
    println!(
        "{}: {} workload(s), {} crash state(s) checked, {} report(s) -> {}",
        meta.source,
        res.workloads,
        res.stats.states_checked,
        res.reports.len(),
        out.display(),
    );
    if !res.errors.is_empty() {
        bail!("{} workload(s) failed to run; see manifest.json", res.errors.len());
    }
    Ok(!res.reports.is_empty())
}

fn read_workload(path: &PathBuf) -> anyhow::Result<Workload> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))?;
    Workload::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn cmd_ace(
    seq: usize,
    metadata_only: bool,
    common: &CommonRun,
    out: &PathBuf,
) -> anyhow::Result<bool> {
    let workloads = acegen::generate_with(seq, metadata_only).map_err(anyhow::Error::msg)?;
    let opts = campaign_options(common, common.cap);
    let res = run_campaign(&workloads, &opts);
    let mut source = format!("ace --seq {seq}");
    if metadata_only {
        source.push_str(" --metadata-only");
    }
    let meta = CampaignMeta {
        source,
        faults: common.faults.describe(),
        cap: common.cap,
        theta: fuzz::DEFAULT_THETA,
    };
    finish_campaign(out, &res, &meta)
}

fn cmd_fuzz(
    budget: usize,
    seed: u64,
    theta: f64,
    seed_files: &[PathBuf],
    common: &CommonRun,
    out: &PathBuf,
) -> anyhow::Result<bool> {
    let seeds: Vec<Workload> =
        seed_files.iter().map(read_workload).collect::<anyhow::Result<_>>()?;
    let cap = common.cap.or(Some(2));
    let fopts = FuzzOptions {
        budget,
        faults: common.faults.clone(),
        cap,
        threads: common.jobs,
        rng_seed: seed,
        capacity: common.capacity,
        theta,
    };
    let mut last_clusters = 0usize;
    let mut next_line = 0usize;
    let outcome = fuzz_dashboard(&fopts, &seeds, &mut last_clusters, &mut next_line);
    println!(
        "fuzz done: {} executed, {} discarded, corpus {}, {} report(s) in {} cluster(s)",
        outcome.executed,
        outcome.discarded,
        outcome.corpus.len(),
        outcome.reports.len(),
        outcome.clusters.len(),
    );
    print!("{}", fuzz::cluster_summary(&outcome.reports, &outcome.clusters));
    for e in &outcome.errors {
        eprintln!("skipped: {e}");
    }
    let res = CampaignResult {
        workloads: outcome.executed,
        reports: outcome.reports,
        stats: outcome.stats,
        coverage: outcome.coverage,
        errors: outcome.errors,
    };
    let meta = CampaignMeta {
        source: format!("fuzz --budget {budget} --seed {seed}"),
        faults: common.faults.describe(),
        cap,
        theta,
    };
    write_outputs(out, &res, &meta)
        .with_context(|| format!("writing outputs under {}", out.display()))?;
    Ok(!res.reports.is_empty())
}

fn fuzz_dashboard(
    fopts: &FuzzOptions,
    seeds: &[Workload],
    last_clusters: &mut usize,
    next_line: &mut usize,
) -> fuzz::FuzzOutcome {
    fuzz::fuzz_loop(fopts, seeds, |t, reports, clusters| {
        let new_cluster = t.clusters != *last_clusters;
        if t.executed >= *next_line || new_cluster {
            eprintln!(
                "[fuzz] {}/{} candidates, corpus {}, coverage {}, reports {}, clusters {}",
                t.executed, t.budget, t.corpus, t.coverage_edges, t.reports, t.clusters,
            );
            *next_line = t.executed + 25;
        }
        if new_cluster {
            eprint!("{}", fuzz::cluster_summary(reports, clusters));
            *last_clusters = t.clusters;
        }
    })
}

fn cmd_run(files: &[PathBuf], common: &CommonRun, out: Option<&PathBuf>) -> anyhow::Result<bool> {
    let workloads: Vec<Workload> =
        files.iter().map(read_workload).collect::<anyhow::Result<_>>()?;
    let opts = campaign_options(common, common.cap);
    let res = run_campaign(&workloads, &opts);
    let meta = CampaignMeta {
        source: format!("run ({} file(s))", files.len()),
        faults: common.faults.describe(),
        cap: common.cap,
        theta: fuzz::DEFAULT_THETA,
    };
    match out {
        Some(dir) => finish_campaign(dir, &res, &meta),
        None => {
            for r in &res.reports {
                print!("{}", r.to_text());
            }
            println!(
                "{} workload(s), {} crash state(s) checked, {} report(s)",
                res.workloads,
                res.stats.states_checked,
                res.reports.len(),
            );
            if !res.errors.is_empty() {
                bail!("{} workload(s) failed to run: {}", res.errors.len(), res.errors.join("; "));
            }
            Ok(!res.reports.is_empty())
        }
    }
}

fn cmd_repro(files: &[PathBuf], capacity: usize) -> anyhow::Result<bool> {
    let mut bugs = false;
    for path in files {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        let report = BugReport::from_text(&text)
            .map_err(anyhow::Error::msg)
            .with_context(|| format!("parsing {}", path.display()))?;
        let outcome = repro(&report, capacity)
            .with_context(|| format!("replaying {}", path.display()))?;
        println!(
            "{}: verdict {} (check `{}`)",
            path.display(),
            outcome.verdict,
            outcome.check,
        );
        if outcome.verdict != report.verdict {
            bail!(
                "{}: verdict {} does not match the recorded {}",
                path.display(),
                outcome.verdict,
                report.verdict,
            );
        }
        bugs |= outcome.verdict.is_failure();
    }
    Ok(bugs)
}

fn real_main(cli: &Cli) -> anyhow::Result<bool> {
    match &cli.cmd {
        Cmd::Ace { seq, metadata_only, common, out } => cmd_ace(*seq, *metadata_only, common, out),
        Cmd::Fuzz { budget, seed, theta, seed_files, common, out } => {
            cmd_fuzz(*budget, *seed, *theta, seed_files, common, out)
        }
        Cmd::Run { files, common, out } => cmd_run(files, common, out.as_ref()),
        Cmd::Repro { reports, capacity } => cmd_repro(reports, *capacity),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(&cli) {
        Ok(false) => ExitCode::SUCCESS,
        Ok(true) => ExitCode::from(1),
        Err(e) => {
            eprintln!("pmcl: {e:#}");
            ExitCode::from(2)
        }
    }
}
