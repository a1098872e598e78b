//! Workload vocabulary: the file-system operations a test run drives, their
//! on-disk text format, and the error surface shared by the subject file
//! system and the in-memory model.
//!
//! A workload has two phases separated by a `setup-done` line. Setup ops run
//! unmarked (no crash points); core ops are the ones under test. The text
//! format is line-oriented so reports can embed workloads verbatim and a
//! failing case can be replayed from the report alone.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::hash::fnv64;

/// Errors an operation can return. Both the subject file system and the
/// reference model produce these; a divergence in error kind between the two
/// on the same op is itself a finding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error, Serialize, Deserialize)]
pub enum FsError {
    #[error("no such file or directory")]
    NotFound,
    #[error("file exists")]
    Exists,
    #[error("not a directory")]
    NotDir,
    #[error("is a directory")]
    IsDir,
    #[error("directory not empty")]
    NotEmpty,
    #[error("no space left on device")]
    NoSpace,
    #[error("file too large")]
    TooBig,
    #[error("file name too long")]
    NameTooLong,
    #[error("bad file handle")]
    BadHandle,
    #[error("invalid argument")]
    Invalid,
    #[error("structure needs cleaning")]
    Corrupt,
}

/// One file-system call. Paths are slash-separated, relative to the root,
/// with no leading slash. `Open` assigns handles in call order starting at 0;
/// `Close` and `WriteFd` refer to those indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FsOp {
    Mkdir { path: String },
    Creat { path: String },
    Rmdir { path: String },
    Unlink { path: String },
    Link { src: String, dst: String },
    Rename { src: String, dst: String },
    Pwrite { path: String, offset: u64, len: u64 },
    Truncate { path: String, size: u64 },
    Fallocate { path: String, offset: u64, len: u64 },
    Open { path: String },
    Close { handle: u64 },
    WriteFd { handle: u64, offset: u64, len: u64 },
}

impl FsOp {
    /// Short verb used in reports and coverage edge names.
    pub fn verb(&self) -> &'static str {
        match self {
            FsOp::Mkdir { .. } => "mkdir",
            FsOp::Creat { .. } => "creat",
            FsOp::Rmdir { .. } => "rmdir",
            FsOp::Unlink { .. } => "unlink",
            FsOp::Link { .. } => "link",
            FsOp::Rename { .. } => "rename",
            FsOp::Pwrite { .. } => "pwrite",
            FsOp::Truncate { .. } => "truncate",
            FsOp::Fallocate { .. } => "fallocate",
            FsOp::Open { .. } => "open",
            FsOp::Close { .. } => "close",
            FsOp::WriteFd { .. } => "write",
        }
    }

    /// True for the metadata-heavy subset used by deeper sequence generation.
    pub fn is_metadata_class(&self) -> bool {
        matches!(
            self,
            FsOp::Pwrite { .. } | FsOp::Link { .. } | FsOp::Unlink { .. } | FsOp::Rename { .. }
        )
    }

    /// Paths this op reads or writes, in argument order.
    pub fn paths(&self) -> Vec<&str> {
        match self {
            FsOp::Mkdir { path }
            | FsOp::Creat { path }
            | FsOp::Rmdir { path }
            | FsOp::Unlink { path }
            | FsOp::Pwrite { path, .. }
            | FsOp::Truncate { path, .. }
            | FsOp::Fallocate { path, .. }
            | FsOp::Open { path } => vec![path],
            FsOp::Link { src, dst } | FsOp::Rename { src, dst } => vec![src, dst],
            FsOp::Close { .. } | FsOp::WriteFd { .. } => vec![],
        }
    }
}

impl fmt::Display for FsOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FsOp::Mkdir { path } => write!(f, "mkdir {path}"),
            FsOp::Creat { path } => write!(f, "creat {path}"),
            FsOp::Rmdir { path } => write!(f, "rmdir {path}"),
            FsOp::Unlink { path } => write!(f, "unlink {path}"),
            FsOp::Link { src, dst } => write!(f, "link {src} {dst}"),
            FsOp::Rename { src, dst } => write!(f, "rename {src} {dst}"),
            FsOp::Pwrite { path, offset, len } => write!(f, "pwrite {path} {offset} {len}"),
            FsOp::Truncate { path, size } => write!(f, "truncate {path} {size}"),
            FsOp::Fallocate { path, offset, len } => write!(f, "fallocate {path} {offset} {len}"),
            FsOp::Open { path } => write!(f, "open {path}"),
            FsOp::Close { handle } => write!(f, "close {handle}"),
            FsOp::WriteFd { handle, offset, len } => write!(f, "write {handle} {offset} {len}"),
        }
    }
}

/// Parse failure for workload text.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("workload line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

/// A two-phase operation sequence. Setup establishes preconditions and runs
/// without crash-point instrumentation; core ops are marked and enumerated.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Workload {
    pub setup: Vec<FsOp>,
    pub core: Vec<FsOp>,
}

/// Divider line between the setup and core phases.
pub const SETUP_DONE: &str = "setup-done";

impl Workload {
    pub fn new(setup: Vec<FsOp>, core: Vec<FsOp>) -> Self {
        Workload { setup, core }
    }

    /// Canonical text: setup lines, the divider, core lines, one per line
    /// with a trailing newline. `parse` of this text reproduces the value.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for op in &self.setup {
            out.push_str(&op.to_string());
            out.push('\n');
        }
        out.push_str(SETUP_DONE);
        out.push('\n');
        for op in &self.core {
            out.push_str(&op.to_string());
            out.push('\n');
        }
        out
    }

    /// Stable identifier: hash of the canonical text, rendered as 16 hex
    /// digits everywhere it appears in output files.
    pub fn id(&self) -> u64 {
        fnv64(self.to_text().as_bytes())
    }

    pub fn id_hex(&self) -> String {
        format!("{:016x}", self.id())
    }

    /// All ops in execution order: setup then core. The position in this
    /// sequence is the op ordinal used to derive deterministic write content.
    pub fn all_ops(&self) -> impl Iterator<Item = &FsOp> {
        self.setup.iter().chain(self.core.iter())
    }

    /// Parse the line format. Blank lines and `#` comments are tolerated; a
    /// missing divider means every op is core.
    pub fn parse(text: &str) -> Result<Workload, ParseError> {
        let mut setup = Vec::new();
        let mut core = Vec::new();
        let mut seen_divider = false;
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == SETUP_DONE {
                if seen_divider {
                    return Err(ParseError {
                        line: idx + 1,
                        msg: "duplicate setup-done divider".into(),
                    });
                }
                seen_divider = true;
                setup = std::mem::take(&mut core);
                continue;
            }
            core.push(parse_op_line(line).map_err(|msg| ParseError { line: idx + 1, msg })?);
        }
        Ok(Workload { setup, core })
    }
}

fn parse_op_line(line: &str) -> Result<FsOp, String> {
    let mut it = line.split_ascii_whitespace();
    let verb = it.next().ok_or("empty line")?;
    let rest: Vec<&str> = it.collect();
    let want = |n: usize| -> Result<(), String> {
        if rest.len() == n {
            Ok(())
        } else {
            Err(format!("{verb} takes {n} argument(s), got {}", rest.len()))
        }
    };
    let path = |s: &str| -> Result<String, String> {
        validate_path(s)?;
        Ok(s.to_string())
    };
    let num = |s: &str| -> Result<u64, String> {
        s.parse::<u64>().map_err(|_| format!("bad number {s:?}"))
    };
    match verb {
        "mkdir" => {
            want(1)?;
            Ok(FsOp::Mkdir { path: path(rest[0])? })
        }
        "creat" => {
            want(1)?;
            Ok(FsOp::Creat { path: path(rest[0])? })
        }
        "rmdir" => {
            want(1)?;
            Ok(FsOp::Rmdir { path: path(rest[0])? })
        }
        "unlink" => {
            want(1)?;
            Ok(FsOp::Unlink { path: path(rest[0])? })
        }
        "link" => {
            want(2)?;
            Ok(FsOp::Link { src: path(rest[0])?, dst: path(rest[1])? })
        }
        "rename" => {
            want(2)?;
            Ok(FsOp::Rename { src: path(rest[0])?, dst: path(rest[1])? })
        }
        "pwrite" => {
            want(3)?;
            Ok(FsOp::Pwrite { path: path(rest[0])?, offset: num(rest[1])?, len: num(rest[2])? })
        }
        "truncate" => {
            want(2)?;
            Ok(FsOp::Truncate { path: path(rest[0])?, size: num(rest[1])? })
        }
        "fallocate" => {
            want(3)?;
            Ok(FsOp::Fallocate { path: path(rest[0])?, offset: num(rest[1])?, len: num(rest[2])? })
        }
        "open" => {
            want(1)?;
            Ok(FsOp::Open { path: path(rest[0])? })
        }
        "close" => {
            want(1)?;
            Ok(FsOp::Close { handle: num(rest[0])? })
        }
        "write" => {
            want(3)?;
            Ok(FsOp::WriteFd { handle: num(rest[0])?, offset: num(rest[1])?, len: num(rest[2])? })
        }
        other => Err(format!("unknown op {other:?}")),
    }
}

/// Path format accepted in workload text: relative, slash-separated,
/// components drawn from `[A-Za-z0-9._-]`, no `.` or `..`. Length limits are
/// a property of the file system under test, not of the format, so they are
/// enforced at call time.
pub fn validate_path(s: &str) -> Result<(), String> {
    if s.is_empty() {
        return Err("empty path".into());
    }
    if s.starts_with('/') || s.ends_with('/') {
        return Err(format!("path {s:?} must be relative with no trailing slash"));
    }
    for comp in s.split('/') {
        if comp.is_empty() {
            return Err(format!("path {s:?} has an empty component"));
        }
        if comp == "." || comp == ".." {
            return Err(format!("path {s:?} uses . or .."));
        }
        if !comp
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'.' || b == b'_' || b == b'-')
        {
            return Err(format!("path {s:?} has characters outside [A-Za-z0-9._-]"));
        }
    }
    Ok(())
}

/// Parent directory of a path within the workload namespace, `None` for
/// top-level names.
pub fn parent_of(path: &str) -> Option<&str> {
    path.rfind('/').map(|i| &path[..i])
}

/// Final component of a path.
pub fn basename(path: &str) -> &str {
    path.rsplit('/').next().unwrap_or(path)
}

/// Deterministic data for write ops. Content is a function of the op's
/// ordinal in the workload and the absolute file offset of each byte, so the
/// subject executor and the model generate identical bytes independently and
/// torn fragments still differ from both the old and new content.
pub fn write_pattern(op_ordinal: u64, offset: u64, len: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(len as usize);
    for i in 0..len {
        let pos = offset + i;
        let b = (op_ordinal as u8)
            .wrapping_mul(31)
            .wrapping_add((pos as u8).wrapping_mul(7))
            .wrapping_add((pos >> 8) as u8)
            .wrapping_add(13);
        out.push(b);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn roundtrip_simple() {
        let wl = Workload::new(
            vec![FsOp::Mkdir { path: "A".into() }, FsOp::Creat { path: "A/foo".into() }],
            vec![
                FsOp::Pwrite { path: "A/foo".into(), offset: 37, len: 63 },
                FsOp::Rename { src: "A/foo".into(), dst: "A/bar".into() },
            ],
        );
        let text = wl.to_text();
        assert_eq!(Workload::parse(&text).unwrap(), wl);
        assert!(text.ends_with('\n'));
    }

    #[test]
    fn missing_divider_means_all_core() {
        let wl = Workload::parse("creat foo\npwrite foo 0 10\n").unwrap();
        assert!(wl.setup.is_empty());
        assert_eq!(wl.core.len(), 2);
    }

    #[test]
    fn comments_and_blanks_skipped() {
        let wl = Workload::parse("# header\n\nmkdir A\nsetup-done\n\ncreat A/foo\n").unwrap();
        assert_eq!(wl.setup, vec![FsOp::Mkdir { path: "A".into() }]);
        assert_eq!(wl.core, vec![FsOp::Creat { path: "A/foo".into() }]);
    }

    #[test]
    fn duplicate_divider_rejected() {
        let err = Workload::parse("setup-done\nsetup-done\n").unwrap_err();
        assert_eq!(err.line, 2);
    }

    #[test]
    fn bad_paths_rejected() {
        for bad in ["/abs", "a//b", "a/", "..", "a/../b", "sp ace", "tab\tx"] {
            assert!(validate_path(bad).is_err(), "{bad:?} should be rejected");
        }
        for good in ["foo", "A/bar", "x.y-z_9", "a/b/c/d"] {
            assert!(validate_path(good).is_ok(), "{good:?} should be accepted");
        }
    }

    #[test]
    fn unknown_verb_and_arity_errors_carry_line_numbers() {
        let err = Workload::parse("mkdir A\nfrobnicate x\n").unwrap_err();
        assert_eq!(err.line, 2);
        let err = Workload::parse("pwrite foo 1\n").unwrap_err();
        assert_eq!(err.line, 1);
    }

    #[test]
    fn id_is_stable_and_text_sensitive() {
        let a = Workload::new(vec![], vec![FsOp::Creat { path: "foo".into() }]);
        let b = Workload::new(vec![], vec![FsOp::Creat { path: "bar".into() }]);
        assert_ne!(a.id(), b.id());
        assert_eq!(a.id(), Workload::parse(&a.to_text()).unwrap().id());
    }

    #[test]
    fn write_pattern_depends_on_ordinal_and_offset() {
        let a = write_pattern(0, 0, 16);
        let b = write_pattern(1, 0, 16);
        let c = write_pattern(0, 8, 16);
        assert_ne!(a, b);
        assert_eq!(&a[8..], &c[..8]);
        assert_eq!(write_pattern(3, 100, 0).len(), 0);
    }

    fn arb_name() -> impl Strategy<Value = String> {
        prop_oneof![
            Just("foo".to_string()),
            Just("bar".to_string()),
            Just("A".to_string()),
            Just("B/qux".to_string()),
            "[a-z]{1,8}",
        ]
    }

    fn arb_op() -> impl Strategy<Value = FsOp> {
        prop_oneof![
            arb_name().prop_map(|path| FsOp::Mkdir { path }),
            arb_name().prop_map(|path| FsOp::Creat { path }),
            arb_name().prop_map(|path| FsOp::Rmdir { path }),
            arb_name().prop_map(|path| FsOp::Unlink { path }),
            (arb_name(), arb_name()).prop_map(|(src, dst)| FsOp::Link { src, dst }),
            (arb_name(), arb_name()).prop_map(|(src, dst)| FsOp::Rename { src, dst }),
            (arb_name(), 0u64..10000, 0u64..10000)
                .prop_map(|(path, offset, len)| FsOp::Pwrite { path, offset, len }),
            (arb_name(), 0u64..40000).prop_map(|(path, size)| FsOp::Truncate { path, size }),
            (arb_name(), 0u64..10000, 1u64..10000)
                .prop_map(|(path, offset, len)| FsOp::Fallocate { path, offset, len }),
            arb_name().prop_map(|path| FsOp::Open { path }),
            (0u64..8).prop_map(|handle| FsOp::Close { handle }),
            (0u64..8, 0u64..10000, 0u64..10000)
                .prop_map(|(handle, offset, len)| FsOp::WriteFd { handle, offset, len }),
        ]
    }

    proptest! {
        #[test]
        fn parse_inverts_to_text(
            setup in proptest::collection::vec(arb_op(), 0..6),
            core in proptest::collection::vec(arb_op(), 0..6),
        ) {
            let wl = Workload::new(setup, core);
            let text = wl.to_text();
            let back = Workload::parse(&text).unwrap();
            prop_assert_eq!(&back, &wl);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
