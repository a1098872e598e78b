//! Catalog of compile-in faults: named, individually switchable regressions
//! of the file system's crash-consistency discipline. Each fault weakens one
//! specific ordering or journaling rule while leaving crash-free behavior
//! identical, so a checker that only looks at final states cannot see them.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub enum FaultId {
    /// `rename` clears the source dentry in place, flushed and fenced, before
    /// the transaction that publishes the destination. A crash between the
    /// two loses the file from both names.
    #[serde(rename = "F-RENAME-INPLACE")]
    RenameInplace,
    /// `rename` over an existing destination publishes the new target dentry
    /// in place before the transaction that clears the source and drops the
    /// old target. A crash in the window shows the file under both names
    /// while the old target's link bookkeeping is still unresolved.
    #[serde(rename = "F-RENAME-STALE-OLD")]
    RenameStaleOld,
    /// `link` bumps the source inode's link log in place, fenced, before the
    /// transaction that adds the new dentry. A crash in the window leaves a
    /// link count one higher than the number of names.
    #[serde(rename = "F-LINK-INPLACE")]
    LinkInplace,
    /// The single-page in-place data write path skips its trailing fence, so
    /// the data may still be in flight when the call returns.
    #[serde(rename = "F-MISSING-FENCE-WRITE")]
    MissingFenceWrite,
    /// Recovery replays the pending-truncate list before rebuilding the
    /// volatile free-page list that replay needs.
    #[serde(rename = "F-RECOVERY-ORDER")]
    RecoveryOrder,
    /// Recovery scans journal slot 0 for every slot instead of walking each
    /// slot, so a committed transaction in slot 1 is never replayed.
    #[serde(rename = "F-JOURNAL-INDEX")]
    JournalIndex,
    /// Inode checksums are written in place after the transaction commits
    /// instead of inside it, so a crash in the window leaves a valid inode
    /// carrying a stale checksum.
    #[serde(rename = "F-CSUM-NONATOMIC")]
    CsumNonatomic,
    /// Handle-based writes update the file size from the handle's stale
    /// private copy instead of the inode, shrinking the file when another
    /// handle grew it in between.
    #[serde(rename = "F-HANDLE-STALE-SIZE")]
    HandleStaleSize,
}

impl FaultId {
    pub const ALL: [FaultId; 8] = [
        FaultId::RenameInplace,
        FaultId::RenameStaleOld,
        FaultId::LinkInplace,
        FaultId::MissingFenceWrite,
        FaultId::RecoveryOrder,
        FaultId::JournalIndex,
        FaultId::CsumNonatomic,
        FaultId::HandleStaleSize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FaultId::RenameInplace => "F-RENAME-INPLACE",
            FaultId::RenameStaleOld => "F-RENAME-STALE-OLD",
            FaultId::LinkInplace => "F-LINK-INPLACE",
            FaultId::MissingFenceWrite => "F-MISSING-FENCE-WRITE",
            FaultId::RecoveryOrder => "F-RECOVERY-ORDER",
            FaultId::JournalIndex => "F-JOURNAL-INDEX",
            FaultId::CsumNonatomic => "F-CSUM-NONATOMIC",
            FaultId::HandleStaleSize => "F-HANDLE-STALE-SIZE",
        }
    }

    pub fn from_name(s: &str) -> Option<FaultId> {
        FaultId::ALL.iter().copied().find(|f| f.name() == s)
    }
}

impl fmt::Display for FaultId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which faults a build has enabled, plus whether inode checksums are
/// maintained and verified. Checksum mode is forced on by the checksum fault
/// since that fault is about how checksums are written.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultConfig {
    enabled: BTreeSet<FaultId>,
    pub checksum_mode: bool,
}

impl FaultConfig {
    /// The fixed build: no faults, checksums off.
    pub fn none() -> Self {
        FaultConfig::default()
    }

    pub fn single(f: FaultId) -> Self {
        let mut c = FaultConfig::none();
        c.enable(f);
        c
    }

    pub fn enable(&mut self, f: FaultId) {
        if f == FaultId::CsumNonatomic {
            self.checksum_mode = true;
        }
        self.enabled.insert(f);
    }

    pub fn has(&self, f: FaultId) -> bool {
        self.enabled.contains(&f)
    }

    pub fn is_empty(&self) -> bool {
        self.enabled.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = FaultId> + '_ {
        self.enabled.iter().copied()
    }

    /// Comma-separated list like `F-RENAME-INPLACE,F-JOURNAL-INDEX`, the
    /// form accepted on the command line; `none` for the fixed build. An
    /// optional `+checksum` suffix turns checksum mode on by itself, so
    /// [`FaultConfig::describe`] output parses back to the same config.
    pub fn parse(s: &str) -> Result<FaultConfig, String> {
        let mut c = FaultConfig::none();
        let mut s = s.trim();
        if let Some(rest) = s.strip_suffix("+checksum") {
            c.checksum_mode = true;
            s = rest.trim();
        }
        if s.is_empty() || s == "none" {
            return Ok(c);
        }
        for part in s.split(',') {
            let part = part.trim();
            match FaultId::from_name(part) {
                Some(f) => c.enable(f),
                None => {
                    return Err(format!(
                        "unknown fault {part:?}; known: {}",
                        FaultId::ALL.map(|f| f.name()).join(", ")
                    ))
                }
            }
        }
        Ok(c)
    }

    /// Render for reports and manifests: fault names joined by commas, with
    /// a checksum-mode suffix when that differs from the default.
    pub fn describe(&self) -> String {
        let mut s = if self.enabled.is_empty() {
            "none".to_string()
        } else {
            self.enabled
                .iter()
                .map(|f| f.name())
                .collect::<Vec<_>>()
                .join(",")
        };
        if self.checksum_mode {
            s.push_str(" +checksum");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        for f in FaultId::ALL {
            assert_eq!(FaultId::from_name(f.name()), Some(f));
        }
        assert_eq!(FaultId::from_name("F-NOPE"), None);
    }

    #[test]
    fn parse_list_and_none() {
        let c = FaultConfig::parse("F-RENAME-INPLACE, F-MISSING-FENCE-WRITE").unwrap();
        assert!(c.has(FaultId::RenameInplace));
        assert!(c.has(FaultId::MissingFenceWrite));
        assert!(!c.has(FaultId::JournalIndex));
        assert!(!c.checksum_mode);
        assert!(FaultConfig::parse("none").unwrap().is_empty());
        assert!(FaultConfig::parse("").unwrap().is_empty());
        assert!(FaultConfig::parse("F-BOGUS").is_err());
    }

    #[test]
    fn checksum_fault_forces_checksum_mode() {
        let c = FaultConfig::single(FaultId::CsumNonatomic);
        assert!(c.checksum_mode);
        assert_eq!(c.describe(), "F-CSUM-NONATOMIC +checksum");
        assert_eq!(FaultConfig::none().describe(), "none");
    }
}
