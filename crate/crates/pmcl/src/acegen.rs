//! Systematic workload generation. A fixed universe of interesting calls is
//! expanded exhaustively into length-1 and length-2 sequences, and the
//! metadata-heavy subset into length-3 sequences. Each sequence gets a
//! synthesized setup phase that satisfies its static preconditions, so the
//! first occurrence of every call has a chance to take its happy path;
//! later occurrences may legally fail and the oracles record those codes.

use crate::workload::{FsOp, Workload};

/// Directories the universe works in.
const DIRS: [&str; 2] = ["A", "B"];
/// Files the universe touches, spread over the root and both directories.
const FILES: [&str; 6] = ["f0", "f1", "A/f2", "A/f3", "B/f4", "B/f5"];
/// Content every synthesized file starts with: one full page, so small
/// overwrites stay in place and larger ones force fresh pages.
const SETUP_FILE_LEN: u64 = 4096;

/// Write shapes: a small overwrite inside the first page, an exact
/// page replacement, and a multi-page extension.
const WRITE_SHAPES: [(u64, u64); 3] = [(37, 63), (0, 4096), (0, 5000)];
/// One truncate size per file: drop everything, cut mid-page, keep exactly
/// the setup content, grow past it, cut to half a page, grow two pages.
const TRUNC_SIZES: [u64; 6] = [0, 1000, 4096, 5000, 2048, 9000];

/// Every call the systematic stage considers, in a fixed order.
pub fn op_universe() -> Vec<FsOp> {
    let mut ops = Vec::with_capacity(56);
    for d in DIRS {
        ops.push(FsOp::Mkdir { path: d.into() });
    }
    for f in FILES {
        ops.push(FsOp::Creat { path: f.into() });
    }
    for f in FILES {
        for (offset, len) in WRITE_SHAPES {
            ops.push(FsOp::Pwrite { path: f.into(), offset, len });
        }
    }
    for (i, f) in FILES.iter().enumerate() {
        ops.push(FsOp::Truncate { path: (*f).into(), size: TRUNC_SIZES[i] });
    }
    for f in FILES {
        ops.push(FsOp::Fallocate { path: f.into(), offset: 0, len: 8192 });
    }
    for (src, dst) in [("f0", "l0"), ("f1", "A/l1"), ("A/f2", "A/l2"), ("B/f4", "l4")] {
        ops.push(FsOp::Link { src: src.into(), dst: dst.into() });
    }
    for (src, dst) in [
        ("f0", "g0"),
        ("f0", "f1"),
        ("A/f2", "A/g2"),
        ("A/f2", "B/f4"),
        ("B/f4", "B/f5"),
        ("A", "C"),
    ] {
        ops.push(FsOp::Rename { src: src.into(), dst: dst.into() });
    }
    for f in FILES {
        ops.push(FsOp::Unlink { path: f.into() });
    }
    for d in DIRS {
        ops.push(FsOp::Rmdir { path: d.into() });
    }
    ops
}

/// The calls whose crash behavior is dominated by metadata updates; the
/// length-3 stage runs over these only.
pub fn metadata_universe() -> Vec<FsOp> {
    op_universe().into_iter().filter(|op| op.is_metadata_class()).collect()
}

/// Paths a call needs to already exist, as (path, wants_dir) pairs, plus
/// whether each path argument's parent chain must exist. Creation calls
/// require only their parents; everything else requires its target.
fn requirements(op: &FsOp) -> Vec<(String, bool)> {
    fn parents_of(p: &str, out: &mut Vec<(String, bool)>) {
        let comps: Vec<&str> = p.split('/').collect();
        let mut prefix = String::new();
        for comp in &comps[..comps.len() - 1] {
            if !prefix.is_empty() {
                prefix.push('/');
            }
            prefix.push_str(comp);
            out.push((prefix.clone(), true));
        }
    }
    let mut out = Vec::new();
    match op {
        FsOp::Mkdir { path } | FsOp::Creat { path } => parents_of(path, &mut out),
        FsOp::Rmdir { path } => {
            parents_of(path, &mut out);
            out.push((path.clone(), true));
        }
        FsOp::Unlink { path }
        | FsOp::Pwrite { path, .. }
        | FsOp::Truncate { path, .. }
        | FsOp::Fallocate { path, .. }
        | FsOp::Open { path } => {
            parents_of(path, &mut out);
            out.push((path.clone(), false));
        }
        FsOp::Link { src, dst } => {
            parents_of(src, &mut out);
            out.push((src.clone(), false));
            parents_of(dst, &mut out);
        }
        FsOp::Rename { src, dst } => {
            parents_of(src, &mut out);
            // A source from the directory pool is a directory rename.
            out.push((src.clone(), DIRS.contains(&src.as_str())));
            parents_of(dst, &mut out);
            // Destinations drawn from the file pool exist beforehand so the
            // rename exercises its overwrite path.
            if FILES.contains(&dst.as_str()) {
                out.push((dst.clone(), false));
            }
        }
        FsOp::Close { .. } | FsOp::WriteFd { .. } => {}
    }
    out
}

/// Build a setup phase satisfying every static requirement of `core`, in
/// first-need order. Files are created with one page of content.
pub fn synthesize_setup(core: &[FsOp]) -> Vec<FsOp> {
    let mut setup = Vec::new();
    let mut have: Vec<String> = Vec::new();
    for op in core {
        for (path, wants_dir) in requirements(op) {
            if have.iter().any(|h| h == &path) {
                continue;
            }
            have.push(path.clone());
            if wants_dir {
                setup.push(FsOp::Mkdir { path });
            } else {
                setup.push(FsOp::Creat { path: path.clone() });
                setup.push(FsOp::Pwrite { path, offset: 0, len: SETUP_FILE_LEN });
            }
        }
    }
    setup
}

fn assemble(core: Vec<FsOp>) -> Workload {
    Workload { setup: synthesize_setup(&core), core }
}

/// All length-1 workloads over the full universe.
pub fn generate_seq1() -> Vec<Workload> {
    generate_with(1, false).unwrap()
}

/// All ordered length-2 workloads over the full universe.
pub fn generate_seq2() -> Vec<Workload> {
    generate_with(2, false).unwrap()
}

/// All ordered length-3 workloads over the metadata universe.
pub fn generate_seq3() -> Vec<Workload> {
    generate_with(3, true).unwrap()
}

/// Dispatch by sequence length. Seq 3 uses the metadata universe; the full
/// universe cubed is available through [`generate_with`].
pub fn generate(seq: usize) -> Result<Vec<Workload>, String> {
    generate_with(seq, seq == 3)
}

/// Exhaustive generation over a chosen universe: every ordered length-`seq`
/// core sequence, each with synthesized setup.
pub fn generate_with(seq: usize, metadata_only: bool) -> Result<Vec<Workload>, String> {
    let uni = if metadata_only { metadata_universe() } else { op_universe() };
    match seq {
        1 => Ok(uni.into_iter().map(|op| assemble(vec![op])).collect()),
        2 => {
            let mut out = Vec::with_capacity(uni.len() * uni.len());
            for a in &uni {
                for b in &uni {
                    out.push(assemble(vec![a.clone(), b.clone()]));
                }
            }
            Ok(out)
        }
        3 => {
            let mut out = Vec::with_capacity(uni.len().pow(3));
            for a in &uni {
                for b in &uni {
                    for c in &uni {
                        out.push(assemble(vec![a.clone(), b.clone(), c.clone()]));
                    }
                }
            }
            Ok(out)
        }
        n => Err(format!("unsupported sequence length {n}; use 1, 2, or 3")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::build_oracles;

    #[test]
    fn universe_counts_are_fixed() {
        assert_eq!(op_universe().len(), 56);
        assert_eq!(metadata_universe().len(), 34);
    }

    #[test]
    fn sequence_counts_are_exact() {
        assert_eq!(generate_seq1().len(), 56);
        assert_eq!(generate_seq2().len(), 3136);
        assert_eq!(generate_seq3().len(), 39304);
    }

    #[test]
    fn every_seq1_core_call_succeeds_in_the_model() {
        for wl in generate_seq1() {
            let set = build_oracles(&wl)
                .unwrap_or_else(|e| panic!("workload {:?}: {e}", wl.to_text()));
            assert_eq!(
                set.pairs[0].result,
                Ok(()),
                "core call failed:\n{}",
                wl.to_text()
            );
        }
    }

    #[test]
    fn every_seq2_setup_is_valid() {
        for wl in generate_seq2() {
            build_oracles(&wl).unwrap_or_else(|e| panic!("workload {:?}: {e}", wl.to_text()));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a: Vec<String> = generate_seq2().iter().map(|w| w.to_text()).collect();
        let b: Vec<String> = generate_seq2().iter().map(|w| w.to_text()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn setup_respects_first_need_order() {
        let core = vec![
            FsOp::Pwrite { path: "A/f2".into(), offset: 0, len: 64 },
            FsOp::Rmdir { path: "A".into() },
        ];
        let setup = synthesize_setup(&core);
        assert_eq!(
            setup,
            vec![
                FsOp::Mkdir { path: "A".into() },
                FsOp::Creat { path: "A/f2".into() },
                FsOp::Pwrite { path: "A/f2".into(), offset: 0, len: SETUP_FILE_LEN },
            ]
        );
    }
}
