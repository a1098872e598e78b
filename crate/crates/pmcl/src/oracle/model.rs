//! In-memory model of the expected file-system semantics. It shares no code
//! with the on-device implementation: paths live in a flat sorted map,
//! file bodies in plain vectors. Error precedence mirrors the device
//! implementation exactly (see the resolve/rename comments there); any drift
//! between the two is a bug in one of them, and the parity tests exist to
//! catch it.
//!
//! The model assumes unbounded space: it never reports `NoSpace`. Workload
//! generators stay far from the device limits, so a `NoSpace` from the
//! device while the model succeeds means the workload was malformed and is
//! reported as a harness-level divergence, not a crash-consistency finding.

use std::collections::BTreeMap;

use crate::reffs::layout::{MAX_FILE_SIZE, NAME_MAX};
use crate::workload::{write_pattern, FsError, FsOp};

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum ModelNode {
    Dir,
    File(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct ModelInode {
    pub(crate) content: Vec<u8>,
    pub(crate) nlink: u32,
    pub(crate) alive: bool,
}

/// The model file system. Directories are pure namespace; files are inodes
/// indexed into `inodes`, shared by hard links. Handles index `handles` and
/// go dead when their inode's last name disappears, matching the device's
/// generation rule.
#[derive(Debug, Clone, Default)]
pub struct ModelFs {
    pub(crate) nodes: BTreeMap<String, ModelNode>,
    pub(crate) inodes: Vec<ModelInode>,
    pub(crate) handles: Vec<Option<usize>>,
}

impl ModelFs {
    pub fn new() -> Self {
        Self::default()
    }

    /// Walk a path to its node. Component length is checked before lookup
    /// and non-directory intermediates stop the walk, in that order.
    fn resolve(&self, path: &str) -> Result<&ModelNode, FsError> {
        let mut walked = String::with_capacity(path.len());
        let mut cur_is_dir = true;
        for comp in path.split('/') {
            if comp.len() > NAME_MAX {
                return Err(FsError::NameTooLong);
            }
            if !cur_is_dir {
                return Err(FsError::NotDir);
            }
            if !walked.is_empty() {
                walked.push('/');
            }
            walked.push_str(comp);
            match self.nodes.get(&walked) {
                Some(node) => cur_is_dir = matches!(node, ModelNode::Dir),
                None => return Err(FsError::NotFound),
            }
        }
        Ok(&self.nodes[&walked])
    }

    /// Check that `path`'s parent chain resolves to a directory and that the
    /// final component's length is legal. The final name's length is checked
    /// after the chain, never before.
    fn resolve_parent<'p>(&self, path: &'p str) -> Result<&'p str, FsError> {
        let (dir_path, name) = match path.rfind('/') {
            Some(i) => (Some(&path[..i]), &path[i + 1..]),
            None => (None, path),
        };
        if let Some(p) = dir_path {
            if !matches!(self.resolve(p)?, ModelNode::Dir) {
                return Err(FsError::NotDir);
            }
        }
        if name.len() > NAME_MAX {
            return Err(FsError::NameTooLong);
        }
        Ok(name)
    }

    fn resolve_file(&self, path: &str) -> Result<usize, FsError> {
        match self.resolve(path)? {
            ModelNode::Dir => Err(FsError::IsDir),
            ModelNode::File(idx) => Ok(*idx),
        }
    }

    fn has_children(&self, path: &str) -> bool {
        let prefix = format!("{path}/");
        self.nodes
            .range(prefix.clone()..)
            .next()
            .is_some_and(|(k, _)| k.starts_with(&prefix))
    }

    fn keys_under(&self, path: &str) -> Vec<String> {
        let prefix = format!("{path}/");
        self.nodes
            .range(prefix.clone()..)
            .take_while(|(k, _)| k.starts_with(&prefix))
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Drop one name's worth of link count; the inode dies with its last
    /// name, which also kills handles pointing at it.
    fn drop_link(&mut self, idx: usize) {
        let inode = &mut self.inodes[idx];
        inode.nlink = inode.nlink.saturating_sub(1);
        if inode.nlink == 0 {
            inode.alive = false;
        }
    }

    // ---- operations -------------------------------------------------------

    /// Dispatch one workload op, mirroring the device dispatcher. `ordinal`
    /// seeds deterministic write content.
    pub fn apply(&mut self, op: &FsOp, ordinal: u64) -> Result<(), FsError> {
        match op {
            FsOp::Mkdir { path } => self.mkdir(path),
            FsOp::Creat { path } => self.creat(path),
            FsOp::Rmdir { path } => self.rmdir(path),
            FsOp::Unlink { path } => self.unlink(path),
            FsOp::Link { src, dst } => self.link(src, dst),
            FsOp::Rename { src, dst } => self.rename(src, dst),
            FsOp::Pwrite { path, offset, len } => {
                self.pwrite(path, *offset, &write_pattern(ordinal, *offset, *len))
            }
            FsOp::Truncate { path, size } => self.truncate(path, *size),
            FsOp::Fallocate { path, offset, len } => self.fallocate(path, *offset, *len),
            FsOp::Open { path } => self.open(path).map(|_| ()),
            FsOp::Close { handle } => self.close(*handle),
            FsOp::WriteFd { handle, offset, len } => {
                let data = write_pattern(ordinal, *offset, *len);
                self.write_fd(*handle, *offset, &data)
            }
        }
    }

    pub fn mkdir(&mut self, path: &str) -> Result<(), FsError> {
        self.resolve_parent(path)?;
        if self.nodes.contains_key(path) {
            return Err(FsError::Exists);
        }
        self.nodes.insert(path.to_string(), ModelNode::Dir);
        Ok(())
    }

    pub fn creat(&mut self, path: &str) -> Result<(), FsError> {
        self.resolve_parent(path)?;
        if self.nodes.contains_key(path) {
            return Err(FsError::Exists);
        }
        self.inodes.push(ModelInode { content: Vec::new(), nlink: 1, alive: true });
        self.nodes.insert(path.to_string(), ModelNode::File(self.inodes.len() - 1));
        Ok(())
    }

    pub fn rmdir(&mut self, path: &str) -> Result<(), FsError> {
        self.resolve_parent(path)?;
        match self.nodes.get(path) {
            None => return Err(FsError::NotFound),
            Some(ModelNode::File(_)) => return Err(FsError::NotDir),
            Some(ModelNode::Dir) => {}
        }
        if self.has_children(path) {
            return Err(FsError::NotEmpty);
        }
        self.nodes.remove(path);
        Ok(())
    }

    pub fn unlink(&mut self, path: &str) -> Result<(), FsError> {
        self.resolve_parent(path)?;
        let idx = match self.nodes.get(path) {
            None => return Err(FsError::NotFound),
            Some(ModelNode::Dir) => return Err(FsError::IsDir),
            Some(ModelNode::File(idx)) => *idx,
        };
        self.drop_link(idx);
        self.nodes.remove(path);
        Ok(())
    }

    pub fn link(&mut self, src: &str, dst: &str) -> Result<(), FsError> {
        let idx = match self.resolve(src)? {
            ModelNode::Dir => return Err(FsError::IsDir),
            ModelNode::File(idx) => *idx,
        };
        self.resolve_parent(dst)?;
        if self.nodes.contains_key(dst) {
            return Err(FsError::Exists);
        }
        self.inodes[idx].nlink += 1;
        self.nodes.insert(dst.to_string(), ModelNode::File(idx));
        Ok(())
    }

    pub fn rename(&mut self, src: &str, dst: &str) -> Result<(), FsError> {
        self.resolve_parent(src)?;
        let snode = match self.nodes.get(src) {
            None => return Err(FsError::NotFound),
            Some(n) => n.clone(),
        };
        self.resolve_parent(dst)?;
        if src == dst {
            return Ok(());
        }
        if matches!(snode, ModelNode::Dir) && dst.starts_with(&format!("{src}/")) {
            return Err(FsError::Invalid);
        }
        let victim = self.nodes.get(dst).cloned();
        if let Some(v) = &victim {
            match (&snode, v) {
                (ModelNode::File(a), ModelNode::File(b)) => {
                    if a == b {
                        return Ok(());
                    }
                }
                (ModelNode::File(_), ModelNode::Dir) => return Err(FsError::IsDir),
                (ModelNode::Dir, ModelNode::File(_)) => return Err(FsError::NotDir),
                (ModelNode::Dir, ModelNode::Dir) => {
                    if self.has_children(dst) {
                        return Err(FsError::NotEmpty);
                    }
                }
            }
        }
        match victim {
            Some(ModelNode::File(idx)) => self.drop_link(idx),
            Some(ModelNode::Dir) => {
                self.nodes.remove(dst);
            }
            None => {}
        }
        if matches!(snode, ModelNode::Dir) {
            for old in self.keys_under(src) {
                let node = self.nodes.remove(&old).expect("key listed above");
                let new = format!("{dst}{}", &old[src.len()..]);
                self.nodes.insert(new, node);
            }
        }
        let node = self.nodes.remove(src).expect("resolved above");
        self.nodes.insert(dst.to_string(), node);
        Ok(())
    }

    pub fn pwrite(&mut self, path: &str, offset: u64, data: &[u8]) -> Result<(), FsError> {
        let idx = self.resolve_file(path)?;
        self.write_data(idx, offset, data)
    }

    pub fn truncate(&mut self, path: &str, size: u64) -> Result<(), FsError> {
        let idx = self.resolve_file(path)?;
        if size > MAX_FILE_SIZE {
            return Err(FsError::TooBig);
        }
        self.inodes[idx].content.resize(size as usize, 0);
        Ok(())
    }

    pub fn fallocate(&mut self, path: &str, offset: u64, len: u64) -> Result<(), FsError> {
        self.resolve_file(path)?;
        if len == 0 {
            return Err(FsError::Invalid);
        }
        let end = offset.checked_add(len).ok_or(FsError::TooBig)?;
        if end > MAX_FILE_SIZE {
            return Err(FsError::TooBig);
        }
        // Reservation only: no visible size or content change.
        Ok(())
    }

    pub fn open(&mut self, path: &str) -> Result<u64, FsError> {
        let idx = self.resolve_file(path)?;
        self.handles.push(Some(idx));
        Ok((self.handles.len() - 1) as u64)
    }

    pub fn close(&mut self, handle: u64) -> Result<(), FsError> {
        let slot = self
            .handles
            .get_mut(handle as usize)
            .ok_or(FsError::BadHandle)?;
        if slot.take().is_none() {
            return Err(FsError::BadHandle);
        }
        Ok(())
    }

    pub fn write_fd(&mut self, handle: u64, offset: u64, data: &[u8]) -> Result<(), FsError> {
        let idx = self
            .handles
            .get(handle as usize)
            .copied()
            .flatten()
            .ok_or(FsError::BadHandle)?;
        if !self.inodes[idx].alive {
            return Err(FsError::BadHandle);
        }
        self.write_data(idx, offset, data)
    }

    fn write_data(&mut self, idx: usize, offset: u64, data: &[u8]) -> Result<(), FsError> {
        if data.is_empty() {
            return Ok(());
        }
        let end = offset.checked_add(data.len() as u64).ok_or(FsError::TooBig)?;
        if end > MAX_FILE_SIZE {
            return Err(FsError::TooBig);
        }
        let content = &mut self.inodes[idx].content;
        if (end as usize) > content.len() {
            content.resize(end as usize, 0);
        }
        content[offset as usize..end as usize].copy_from_slice(data);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_of_path_errors() {
        let mut m = ModelFs::new();
        m.creat("f").unwrap();
        // Component length beats existence.
        let long = "x".repeat(NAME_MAX + 1);
        assert_eq!(m.creat(&format!("{long}/f")), Err(FsError::NameTooLong));
        assert_eq!(m.mkdir(&format!("missing/{long}")), Err(FsError::NotFound));
        // Non-directory intermediate beats missing leaf.
        assert_eq!(m.creat("f/child"), Err(FsError::NotDir));
        assert_eq!(m.resolve("f/child").unwrap_err(), FsError::NotDir);
    }

    #[test]
    fn rename_follows_documented_order() {
        let mut m = ModelFs::new();
        m.mkdir("A").unwrap();
        m.mkdir("A/B").unwrap();
        m.creat("f").unwrap();
        // Missing source beats a bad destination parent.
        assert_eq!(m.rename("nope", "also/nope"), Err(FsError::NotFound));
        // Same-string rename is a no-op even for directories.
        assert_eq!(m.rename("A", "A"), Ok(()));
        // A directory cannot move into its own subtree.
        assert_eq!(m.rename("A", "A/B/C"), Err(FsError::Invalid));
        // Kind mismatches.
        assert_eq!(m.rename("f", "A"), Err(FsError::IsDir));
        assert_eq!(m.rename("A", "f"), Err(FsError::NotDir));
        // Occupied directory victim.
        m.mkdir("D").unwrap();
        assert_eq!(m.rename("D", "A"), Err(FsError::NotEmpty));
    }

    #[test]
    fn rename_moves_directory_subtree() {
        let mut m = ModelFs::new();
        m.mkdir("A").unwrap();
        m.mkdir("A/B").unwrap();
        m.creat("A/B/f").unwrap();
        m.pwrite("A/B/f", 0, b"abc").unwrap();
        m.rename("A", "Z").unwrap();
        assert!(m.nodes.contains_key("Z/B/f"));
        assert!(!m.nodes.contains_key("A"));
        assert_eq!(m.resolve_file("Z/B/f").map(|i| m.inodes[i].content.clone()), Ok(b"abc".to_vec()));
    }

    #[test]
    fn rename_onto_own_hardlink_is_noop() {
        let mut m = ModelFs::new();
        m.creat("f").unwrap();
        m.link("f", "g").unwrap();
        assert_eq!(m.rename("f", "g"), Ok(()));
        assert!(m.nodes.contains_key("f"));
        assert!(m.nodes.contains_key("g"));
        let idx = m.resolve_file("f").unwrap();
        assert_eq!(m.inodes[idx].nlink, 2);
    }

    #[test]
    fn rename_overwrite_drops_victim_link() {
        let mut m = ModelFs::new();
        m.creat("a").unwrap();
        m.creat("b").unwrap();
        m.link("b", "b2").unwrap();
        let b = m.resolve_file("b").unwrap();
        m.rename("a", "b").unwrap();
        assert_eq!(m.inodes[b].nlink, 1);
        assert!(m.inodes[b].alive);
        m.rename("b", "b2").unwrap();
        assert!(!m.inodes[b].alive);
    }

    #[test]
    fn handles_follow_inodes_not_paths() {
        let mut m = ModelFs::new();
        m.creat("f").unwrap();
        let h = m.open("f").unwrap();
        m.rename("f", "g").unwrap();
        assert_eq!(m.write_fd(h, 0, b"x"), Ok(()));
        m.unlink("g").unwrap();
        assert_eq!(m.write_fd(h, 0, b"y"), Err(FsError::BadHandle));
        // Close still works on a dead handle; double close does not.
        assert_eq!(m.close(h), Ok(()));
        assert_eq!(m.close(h), Err(FsError::BadHandle));
    }

    #[test]
    fn write_grows_with_zero_fill() {
        let mut m = ModelFs::new();
        m.creat("f").unwrap();
        m.pwrite("f", 4, b"zz").unwrap();
        let idx = m.resolve_file("f").unwrap();
        assert_eq!(m.inodes[idx].content, vec![0, 0, 0, 0, b'z', b'z']);
        assert_eq!(m.pwrite("f", MAX_FILE_SIZE, b"x"), Err(FsError::TooBig));
        assert_eq!(m.pwrite("f", u64::MAX, b"x"), Err(FsError::TooBig));
        assert_eq!(m.pwrite("f", u64::MAX, b""), Ok(()));
    }

    #[test]
    fn fallocate_is_invisible_but_validated() {
        let mut m = ModelFs::new();
        m.creat("f").unwrap();
        assert_eq!(m.fallocate("f", 0, 0), Err(FsError::Invalid));
        assert_eq!(m.fallocate("f", 0, MAX_FILE_SIZE + 1), Err(FsError::TooBig));
        assert_eq!(m.fallocate("f", 0, 4096), Ok(()));
        let idx = m.resolve_file("f").unwrap();
        assert!(m.inodes[idx].content.is_empty());
    }
}
