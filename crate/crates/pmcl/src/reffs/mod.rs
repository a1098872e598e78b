//! A small journaling file system for persistent memory, written directly
//! against [`PmDevice`](crate::pmem::PmDevice). It exists to be tested: its
//! persistence discipline is deliberately minimal, every interesting branch
//! carries a coverage label, and a catalog of switchable faults can weaken
//! individual ordering rules without changing crash-free behavior in
//! ordinary runs.
//!
//! Durability rules of the fixed build:
//!
//! - Every metadata mutation travels through the word-granular redo journal
//!   ([`journal`]), so each call's metadata effect is all-or-nothing.
//! - File data is written with non-temporal copies. A single-page write that
//!   stays within the current size goes in place, fenced; anything else
//!   builds fresh pages and swaps pointers inside the transaction.
//! - Shrinking truncates log the inode in a pending-truncate list before
//!   cutting, and mounts replay the list, so pages can be freed and tails
//!   zeroed lazily.
//! - Bytes beyond a file's size inside allocated pages are always zero.
//!
//! Mount rebuilds the volatile state (free pages, free inodes, cached sizes)
//! by scanning the inode table; nothing volatile is trusted across a crash.

pub mod faults;
pub mod journal;
pub mod layout;

use std::collections::{BTreeSet, HashMap};

use crate::cov::CovSet;
use crate::pmem::PmDevice;
use crate::workload::{write_pattern, FsError, FsOp};
pub use faults::{FaultConfig, FaultId};

use journal::Txn;
use layout::*;

/// Mount could not produce a usable file system. Each variant is a
/// structured recovery failure, not a guess from a timeout.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MountError {
    #[error("superblock: {0}")]
    Superblock(String),
    #[error("{0}")]
    Journal(#[from] journal::JournalCorrupt),
    #[error("recovery: {0}")]
    Recovery(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Stat {
    pub is_dir: bool,
    pub size: u64,
    pub nlink: u32,
}

#[derive(Debug, Clone, Copy)]
struct RawInode {
    mode: u32,
    size: u64,
    direct: [u32; N_DIRECT],
    nlink: u32,
    log_count: u32,
}

#[derive(Debug, Clone, Copy)]
struct Handle {
    ino: u32,
    gen: u64,
    /// Size as this handle last saw it; only consulted by the stale-size
    /// fault.
    local_size: u64,
}

/// DRAM-side state, rebuilt from the media at every mount. The page
/// allocator starts uninitialized so recovery steps that run before the
/// rebuild (a fault can reorder them) fail loudly instead of corrupting.
struct VolatileState {
    free_pages: Option<Vec<u32>>,
    free_inodes: Vec<u32>,
    file_sizes: HashMap<u32, u64>,
    corrupt: BTreeSet<u32>,
    handles: Vec<Option<Handle>>,
    inode_gen: HashMap<u32, u64>,
}

impl VolatileState {
    fn empty() -> VolatileState {
        VolatileState {
            free_pages: None,
            free_inodes: Vec::new(),
            file_sizes: HashMap::new(),
            corrupt: BTreeSet::new(),
            handles: Vec::new(),
            inode_gen: HashMap::new(),
        }
    }
}

pub struct Reffs<'d, 'c> {
    pub(crate) dev: &'d mut PmDevice,
    cov: &'c mut CovSet,
    faults: FaultConfig,
    checksum_mode: bool,
    page_count: usize,
    txn_counter: u64,
    vs: VolatileState,
}

/// Write an empty file system. The metadata region is assembled in memory
/// and landed with one non-temporal copy plus a fence; mkfs is setup, not a
/// crash surface.
pub fn mkfs(dev: &mut PmDevice, checksum_mode: bool) -> Result<(), MountError> {
    let page_count = page_count_for(dev.capacity());
    if page_count < DATA_PAGE + MIN_DATA_PAGES {
        return Err(MountError::Superblock(format!(
            "capacity {} gives {page_count} pages, need at least {}",
            dev.capacity(),
            DATA_PAGE + MIN_DATA_PAGES
        )));
    }
    if page_count > u32::MAX as usize {
        return Err(MountError::Superblock("page count exceeds u32".into()));
    }
    let mut meta = vec![0u8; DATA_PAGE * PAGE_SIZE];
    let put32 = |buf: &mut [u8], off: usize, v: u32| {
        buf[off..off + 4].copy_from_slice(&v.to_le_bytes());
    };
    put32(&mut meta, SB_MAGIC_OFF, SB_MAGIC);
    put32(&mut meta, SB_VERSION_OFF, LAYOUT_VERSION);
    put32(&mut meta, SB_PAGE_SIZE_OFF, PAGE_SIZE as u32);
    put32(&mut meta, SB_PAGE_COUNT_OFF, page_count as u32);
    put32(&mut meta, SB_INODE_COUNT_OFF, INODE_COUNT as u32);
    put32(&mut meta, SB_CHECKSUM_MODE_OFF, checksum_mode as u32);
    // Root inode: empty directory, one reference.
    let root = inode_off(ROOT_INO);
    let put64 = |buf: &mut [u8], off: usize, v: u64| {
        buf[off..off + 8].copy_from_slice(&v.to_le_bytes());
    };
    put64(&mut meta, root + INODE_WORD0, pack_mode_csum(MODE_DIR, 0));
    put64(&mut meta, root + INODE_LOG_COUNT_OFF, 1);
    put64(&mut meta, root + INODE_LOG_OFF, 1);
    if checksum_mode {
        let csum = inode_checksum(&meta[root..root + INODE_SIZE]);
        put64(&mut meta, root + INODE_WORD0, pack_mode_csum(MODE_DIR, csum));
    }
    dev.nt_memcpy(0, &meta).expect("metadata region in range");
    dev.sfence();
    Ok(())
}

/// Mount: validate the superblock, recover the journal, verify checksums,
/// rebuild volatile state, and replay pending truncates.
pub fn mount<'d, 'c>(
    dev: &'d mut PmDevice,
    fault_config: &FaultConfig,
    cov: &'c mut CovSet,
) -> Result<Reffs<'d, 'c>, MountError> {
    let sb = |off: usize| -> u32 {
        let word = dev.read_u64(off / 8 * 8).expect("superblock in range");
        if off % 8 == 0 {
            word as u32
        } else {
            (word >> 32) as u32
        }
    };
    if sb(SB_MAGIC_OFF) != SB_MAGIC {
        return Err(MountError::Superblock("bad magic".into()));
    }
    if sb(SB_VERSION_OFF) != LAYOUT_VERSION {
        return Err(MountError::Superblock(format!(
            "layout version {} unsupported",
            sb(SB_VERSION_OFF)
        )));
    }
    if sb(SB_PAGE_SIZE_OFF) as usize != PAGE_SIZE
        || sb(SB_INODE_COUNT_OFF) as usize != INODE_COUNT
    {
        return Err(MountError::Superblock("geometry mismatch".into()));
    }
    let page_count = sb(SB_PAGE_COUNT_OFF) as usize;
    if page_count != page_count_for(dev.capacity()) {
        return Err(MountError::Superblock(format!(
            "page count {page_count} does not match device capacity"
        )));
    }
    let checksum_mode = sb(SB_CHECKSUM_MODE_OFF) != 0;

    let mut fs = Reffs {
        dev,
        cov,
        faults: fault_config.clone(),
        checksum_mode,
        page_count,
        txn_counter: 0,
        vs: VolatileState::empty(),
    };
    let redirect = if fs.faults.has(FaultId::JournalIndex) {
        fs.cov.hit("fault.recovery.journal-slot0");
        Some(0)
    } else {
        None
    };
    journal::recover_all(fs.dev, redirect, fs.cov)?;
    fs.scan_inodes();
    if fs.faults.has(FaultId::RecoveryOrder) {
        fs.cov.hit("fault.recovery.order");
        fs.replay_truncates().map_err(MountError::Recovery)?;
        fs.rebuild_alloc();
    } else {
        fs.rebuild_alloc();
        fs.replay_truncates().map_err(MountError::Recovery)?;
    }
    fs.cov.hit("recovery.mount.ok");
    Ok(fs)
}

impl<'d, 'c> Reffs<'d, 'c> {
    /// The mounted device, for harnesses that place syscall markers or
    /// barriers around calls.
    pub fn device(&mut self) -> &mut PmDevice {
        self.dev
    }

    // ---- recovery -------------------------------------------------------

    /// Classify every inode: free, live, or corrupt. Corruption is a failed
    /// checksum (when the superblock enables them), a mode outside the known
    /// set, or an impossible size or page pointer.
    fn scan_inodes(&mut self) {
        for ino in 0..INODE_COUNT as u32 {
            let node = self.read_inode_unchecked(ino);
            if node.mode == MODE_FREE {
                continue;
            }
            if node.mode != MODE_FILE && node.mode != MODE_DIR {
                self.cov.hit("recovery.inode.bad-mode");
                self.vs.corrupt.insert(ino);
                continue;
            }
            if node.mode == MODE_FILE && node.size > MAX_FILE_SIZE {
                self.cov.hit("recovery.inode.bad-size");
                self.vs.corrupt.insert(ino);
                continue;
            }
            if node
                .direct
                .iter()
                .any(|&p| p != 0 && ((p as usize) < DATA_PAGE || (p as usize) >= self.page_count))
            {
                self.cov.hit("recovery.inode.bad-page");
                self.vs.corrupt.insert(ino);
                continue;
            }
            if self.checksum_mode {
                let bytes = self
                    .dev
                    .read(inode_off(ino), INODE_SIZE)
                    .expect("inode table in range")
                    .to_vec();
                let (_, stored) = unpack_mode_csum(u64::from_le_bytes(
                    bytes[0..8].try_into().unwrap(),
                ));
                if inode_checksum(&bytes) != stored {
                    self.cov.hit("recovery.inode.bad-csum");
                    self.vs.corrupt.insert(ino);
                } else {
                    self.cov.hit("recovery.inode.csum-ok");
                }
            }
        }
    }

    /// Build the free-page list, free-inode list, and size cache from the
    /// inode table. Corrupt inodes stay occupied and keep their in-range
    /// pages referenced, conservatively.
    fn rebuild_alloc(&mut self) {
        self.cov.hit("recovery.alloc.init");
        let mut used: BTreeSet<u32> = BTreeSet::new();
        let mut free_inodes = Vec::new();
        for ino in 0..INODE_COUNT as u32 {
            let node = self.read_inode_unchecked(ino);
            if node.mode == MODE_FREE && !self.vs.corrupt.contains(&ino) {
                free_inodes.push(ino);
                continue;
            }
            for &p in &node.direct {
                if p != 0 && (p as usize) >= DATA_PAGE && (p as usize) < self.page_count {
                    used.insert(p);
                }
            }
            if node.mode == MODE_FILE && !self.vs.corrupt.contains(&ino) {
                self.vs.file_sizes.insert(ino, node.size);
            }
        }
        free_inodes.reverse();
        let mut free_pages: Vec<u32> = (DATA_PAGE as u32..self.page_count as u32)
            .filter(|p| !used.contains(p))
            .collect();
        free_pages.reverse();
        self.vs.free_pages = Some(free_pages);
        self.vs.free_inodes = free_inodes;
    }

    /// Replay the pending-truncate list: re-complete each logged inode's
    /// truncate at its current size, then release the slot. Idempotent, so
    /// it is safe however late the crash was.
    fn replay_truncates(&mut self) -> Result<(), String> {
        for slot in 0..TRUNC_SLOTS {
            let off = trunc_slot_off(slot);
            let v = self.dev.read_u64(off).expect("truncate list in range");
            if v == 0 {
                continue;
            }
            let ino = (v - 1) as u32;
            if ino as usize >= INODE_COUNT {
                self.cov.hit("recovery.trunc.bad-ino");
                self.clear_trunc_slot(slot);
                continue;
            }
            if self.vs.corrupt.contains(&ino) {
                self.cov.hit("recovery.trunc.corrupt-target");
                self.clear_trunc_slot(slot);
                continue;
            }
            let node = self.read_inode_unchecked(ino);
            if node.mode != MODE_FILE {
                self.cov.hit("recovery.trunc.stale");
                self.clear_trunc_slot(slot);
                continue;
            }
            self.cov.hit("recovery.trunc.replay");
            self.complete_truncate(ino)?;
            self.clear_trunc_slot(slot);
        }
        Ok(())
    }

    fn clear_trunc_slot(&mut self, slot: usize) {
        let off = trunc_slot_off(slot);
        self.store_word(off, 0);
        self.flush_word(off);
        self.dev.sfence();
    }

    // ---- small device helpers -------------------------------------------

    /// Coverage hit so far in this session (recovery plus operations).
    pub fn coverage(&self) -> &CovSet {
        self.cov
    }

    fn store_word(&mut self, off: usize, val: u64) {
        self.dev.store_u64(off, val).expect("offset in range");
    }

    fn flush_word(&mut self, off: usize) {
        let line = self.dev.line_size();
        self.dev.flush_line(off / line * line).expect("aligned");
    }

    fn read_word(&self, off: usize) -> u64 {
        self.dev.read_u64(off).expect("offset in range")
    }

    fn read_inode_unchecked(&self, ino: u32) -> RawInode {
        let base = inode_off(ino);
        let (mode, _) = unpack_mode_csum(self.read_word(base + INODE_WORD0));
        let size = self.read_word(base + INODE_SIZE_OFF);
        let mut direct = [0u32; N_DIRECT];
        for k in 0..N_DIRECT {
            direct[k] = direct_from_word(self.read_word(inode_direct_word_off(ino, k)), k);
        }
        let log_count = self.read_word(base + INODE_LOG_COUNT_OFF) as u32;
        let nlink = if log_count == 0 {
            0
        } else {
            let idx = (log_count as usize).min(INODE_LOG_CAP) - 1;
            self.read_word(inode_log_entry_off(ino, idx)) as u32
        };
        RawInode { mode, size, direct, nlink, log_count }
    }

    // ---- transactions ----------------------------------------------------

    /// Commit a transaction: recompute checksums of touched inodes into the
    /// transaction, clear the slot if a stale commit still occupies it, and
    /// run the journal protocol. The checksum fault moves the checksum
    /// update after the commit, in place and unfenced.
    fn commit_txn(&mut self, mut txn: Txn) {
        if txn.is_empty() {
            self.cov.hit("txn.commit.empty");
            return;
        }
        let touched = touched_inodes(&txn);
        let lazy_csum = self.faults.has(FaultId::CsumNonatomic);
        if self.checksum_mode && !lazy_csum {
            for &ino in &touched {
                let bytes = self.inode_bytes_pending(&txn, ino);
                let csum = inode_checksum(&bytes);
                let (mode, _) =
                    unpack_mode_csum(txn.pending_word(self.dev, inode_word0_off(ino)));
                txn.set_word(self.dev, inode_word0_off(ino), pack_mode_csum(mode, csum));
            }
        }
        let slot = (self.txn_counter % JOURNAL_COUNT as u64) as usize;
        let seq = self.txn_counter;
        self.txn_counter += 1;
        txn.commit(self.dev, slot, seq, self.cov);
        if self.checksum_mode && lazy_csum {
            self.cov.hit("fault.csum.lazy");
            for &ino in &touched {
                let bytes =
                    self.dev.read(inode_off(ino), INODE_SIZE).expect("in range").to_vec();
                let csum = inode_checksum(&bytes);
                let (mode, _) = unpack_mode_csum(self.read_word(inode_word0_off(ino)));
                self.store_word(inode_word0_off(ino), pack_mode_csum(mode, csum));
                self.flush_word(inode_word0_off(ino));
                // No fence: the checksum rides along with whatever fence
                // happens next. That window is the fault.
            }
        }
    }

    /// Inode bytes as they will read after `txn` applies.
    fn inode_bytes_pending(&self, txn: &Txn, ino: u32) -> [u8; INODE_SIZE] {
        let mut bytes = [0u8; INODE_SIZE];
        let base = inode_off(ino);
        for w in 0..INODE_SIZE / 8 {
            let val = txn.pending_word(self.dev, base + w * 8);
            bytes[w * 8..w * 8 + 8].copy_from_slice(&val.to_le_bytes());
        }
        bytes
    }

    // ---- allocation ------------------------------------------------------

    fn alloc_page(&mut self) -> Result<u32, FsError> {
        self.vs
            .free_pages
            .as_mut()
            .expect("page allocator initialized at mount")
            .pop()
            .ok_or(FsError::NoSpace)
    }

    fn free_page(&mut self, page: u32) -> Result<(), String> {
        match &mut self.vs.free_pages {
            Some(list) => {
                list.push(page);
                list.sort_unstable_by(|a, b| b.cmp(a));
                Ok(())
            }
            None => Err("page allocator used before initialization".into()),
        }
    }

    fn alloc_inode(&mut self) -> Result<u32, FsError> {
        self.vs.free_inodes.pop().ok_or(FsError::NoSpace)
    }

    fn free_inode(&mut self, ino: u32) {
        *self.vs.inode_gen.entry(ino).or_insert(0) += 1;
        self.vs.file_sizes.remove(&ino);
        self.vs.free_inodes.push(ino);
        self.vs.free_inodes.sort_unstable_by(|a, b| b.cmp(a));
    }

    // ---- path resolution ------------------------------------------------

    /// Walk a path to its inode. Component length is checked before lookup,
    /// and corrupt or non-directory intermediates stop the walk. The same
    /// precedence is implemented by the in-memory model; keep them in step.
    fn resolve(&mut self, path: &str) -> Result<u32, FsError> {
        let mut cur = ROOT_INO;
        for comp in path.split('/') {
            if comp.len() > NAME_MAX {
                return Err(FsError::NameTooLong);
            }
            if self.vs.corrupt.contains(&cur) {
                return Err(FsError::Corrupt);
            }
            let node = self.read_inode_unchecked(cur);
            if node.mode != MODE_DIR {
                return Err(FsError::NotDir);
            }
            match self.lookup(&node, comp) {
                Some((ino, _, _)) => cur = ino,
                None => return Err(FsError::NotFound),
            }
        }
        Ok(cur)
    }

    /// Resolve the directory that holds `path`'s final component and check
    /// that component's length. Returns (dir inode, name).
    fn resolve_parent<'p>(&mut self, path: &'p str) -> Result<(u32, &'p str), FsError> {
        let (dir_path, name) = match path.rfind('/') {
            Some(i) => (Some(&path[..i]), &path[i + 1..]),
            None => (None, path),
        };
        let dir = match dir_path {
            Some(p) => self.resolve(p)?,
            None => ROOT_INO,
        };
        if self.vs.corrupt.contains(&dir) {
            return Err(FsError::Corrupt);
        }
        if self.read_inode_unchecked(dir).mode != MODE_DIR {
            return Err(FsError::NotDir);
        }
        if name.len() > NAME_MAX {
            return Err(FsError::NameTooLong);
        }
        Ok((dir, name))
    }

    /// Scan a directory for `name`. Returns (ino, page, slot).
    fn lookup(&self, dir: &RawInode, name: &str) -> Option<(u32, usize, usize)> {
        for &p in dir.direct.iter() {
            if p == 0 {
                continue;
            }
            for slot in 0..DENTRIES_PER_PAGE {
                let ctrl = self.read_word(dentry_ctrl_off(p as usize, slot));
                let (ino, in_use) = unpack_dentry_ctrl(ctrl);
                if in_use && self.dentry_name(p as usize, slot) == name {
                    return Some((ino, p as usize, slot));
                }
            }
        }
        None
    }

    fn dentry_name(&self, page: usize, slot: usize) -> String {
        let buf = self
            .dev
            .read(dentry_off(page, slot), NAME_MAX + 1)
            .expect("in range");
        let end = buf.iter().position(|&b| b == 0).unwrap_or(buf.len());
        String::from_utf8_lossy(&buf[..end]).into_owned()
    }

    /// Every live entry of a directory, in (page, slot) order.
    fn list_entries(&self, dir: &RawInode) -> Vec<(u32, usize, usize, String)> {
        let mut out = Vec::new();
        for &p in dir.direct.iter() {
            if p == 0 {
                continue;
            }
            for slot in 0..DENTRIES_PER_PAGE {
                let (ino, in_use) =
                    unpack_dentry_ctrl(self.read_word(dentry_ctrl_off(p as usize, slot)));
                if in_use {
                    out.push((ino, p as usize, slot, self.dentry_name(p as usize, slot)));
                }
            }
        }
        out
    }

    /// Add `name -> child` to a directory inside `txn`, growing the
    /// directory by one zeroed page if every slot is taken.
    fn dentry_insert(
        &mut self,
        txn: &mut Txn,
        dir_ino: u32,
        name: &str,
        child: u32,
    ) -> Result<(), FsError> {
        let dir = self.read_inode_unchecked(dir_ino);
        let mut target: Option<(usize, usize)> = None;
        'outer: for &p in dir.direct.iter() {
            if p == 0 {
                continue;
            }
            for slot in 0..DENTRIES_PER_PAGE {
                let (_, in_use) =
                    unpack_dentry_ctrl(self.read_word(dentry_ctrl_off(p as usize, slot)));
                if !in_use {
                    target = Some((p as usize, slot));
                    break 'outer;
                }
            }
        }
        let (page, slot) = match target {
            Some(t) => t,
            None => {
                let k = dir
                    .direct
                    .iter()
                    .position(|&p| p == 0)
                    .ok_or(FsError::NoSpace)?;
                let p = self.alloc_page()?;
                self.cov.hit("op.dir.grow");
                // Zero the page before linking it so stale dentries from a
                // prior life can never surface; invisible unless the
                // transaction commits.
                self.dev
                    .nt_memset(page_off(p as usize), 0, PAGE_SIZE)
                    .expect("data page in range");
                self.dev.sfence();
                let woff = inode_direct_word_off(dir_ino, k);
                let word = direct_into_word(txn.pending_word(self.dev, woff), k, p);
                txn.set_word(self.dev, woff, word);
                (p as usize, 0)
            }
        };
        let mut name_bytes = [0u8; NAME_MAX + 1];
        name_bytes[..name.len()].copy_from_slice(name.as_bytes());
        txn.set_bytes(self.dev, dentry_off(page, slot), &name_bytes);
        txn.set_word(self.dev, dentry_ctrl_off(page, slot), pack_dentry_ctrl(child, true));
        Ok(())
    }

    /// Append a link-count value to an inode's log inside `txn`, compacting
    /// to a single entry when the log is full.
    fn log_append(&mut self, txn: &mut Txn, ino: u32, value: u32) {
        let count = txn.pending_word(self.dev, inode_log_count_off(ino)) as u32;
        if (count as usize) < INODE_LOG_CAP {
            txn.set_word(self.dev, inode_log_entry_off(ino, count as usize), value as u64);
            txn.set_word(self.dev, inode_log_count_off(ino), (count + 1) as u64);
        } else {
            self.cov.hit("op.linklog.compact");
            txn.set_word(self.dev, inode_log_entry_off(ino, 0), value as u64);
            txn.set_word(self.dev, inode_log_count_off(ino), 1);
        }
    }

    /// Initialize a (possibly recycled) inode inside `txn`: mode, zero size,
    /// cleared page pointers, link log restarted at `nlink`.
    fn init_inode(&mut self, txn: &mut Txn, ino: u32, mode: u32, nlink: u32) {
        txn.set_word(self.dev, inode_word0_off(ino), pack_mode_csum(mode, 0));
        txn.set_word(self.dev, inode_size_off(ino), 0);
        for w in 0..N_DIRECT / 2 {
            txn.set_word(self.dev, inode_off(ino) + INODE_DIRECT_OFF + w * 8, 0);
        }
        txn.set_word(self.dev, inode_log_entry_off(ino, 0), nlink as u64);
        txn.set_word(self.dev, inode_log_count_off(ino), 1);
    }

    // ---- operations -------------------------------------------------------

    /// Dispatch one workload op. `ordinal` is the op's position in the
    /// workload (setup plus core) and seeds deterministic write content.
    pub fn apply(&mut self, op: &FsOp, ordinal: u64) -> Result<(), FsError> {
        let r = match op {
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
        };
        if let Err(e) = r {
            self.cov.hit(err_edge(e));
        }
        r
    }

    pub fn mkdir(&mut self, path: &str) -> Result<(), FsError> {
        let (dir, name) = self.resolve_parent(path)?;
        let dnode = self.read_inode_unchecked(dir);
        if self.lookup(&dnode, name).is_some() {
            return Err(FsError::Exists);
        }
        let ino = self.alloc_inode()?;
        let mut txn = Txn::new();
        self.init_inode(&mut txn, ino, MODE_DIR, 1);
        self.dentry_insert(&mut txn, dir, name, ino)?;
        self.commit_txn(txn);
        self.cov.hit("op.mkdir.ok");
        Ok(())
    }

    pub fn creat(&mut self, path: &str) -> Result<(), FsError> {
        let (dir, name) = self.resolve_parent(path)?;
        let dnode = self.read_inode_unchecked(dir);
        if self.lookup(&dnode, name).is_some() {
            return Err(FsError::Exists);
        }
        let ino = self.alloc_inode()?;
        let mut txn = Txn::new();
        self.init_inode(&mut txn, ino, MODE_FILE, 1);
        self.dentry_insert(&mut txn, dir, name, ino)?;
        self.commit_txn(txn);
        self.vs.file_sizes.insert(ino, 0);
        self.cov.hit("op.creat.ok");
        Ok(())
    }

    pub fn rmdir(&mut self, path: &str) -> Result<(), FsError> {
        let (dir, name) = self.resolve_parent(path)?;
        let dnode = self.read_inode_unchecked(dir);
        let (ino, page, slot) = self.lookup(&dnode, name).ok_or(FsError::NotFound)?;
        if self.vs.corrupt.contains(&ino) {
            return Err(FsError::Corrupt);
        }
        let node = self.read_inode_unchecked(ino);
        if node.mode != MODE_DIR {
            return Err(FsError::NotDir);
        }
        if !self.list_entries(&node).is_empty() {
            return Err(FsError::NotEmpty);
        }
        let mut txn = Txn::new();
        txn.set_word(self.dev, dentry_ctrl_off(page, slot), 0);
        txn.set_word(self.dev, inode_word0_off(ino), pack_mode_csum(MODE_FREE, 0));
        self.commit_txn(txn);
        for &p in node.direct.iter().filter(|&&p| p != 0) {
            self.free_page(p).expect("allocator initialized at mount");
        }
        self.free_inode(ino);
        self.cov.hit("op.rmdir.ok");
        Ok(())
    }

    pub fn unlink(&mut self, path: &str) -> Result<(), FsError> {
        let (dir, name) = self.resolve_parent(path)?;
        let dnode = self.read_inode_unchecked(dir);
        let (ino, page, slot) = self.lookup(&dnode, name).ok_or(FsError::NotFound)?;
        if self.vs.corrupt.contains(&ino) {
            return Err(FsError::Corrupt);
        }
        let node = self.read_inode_unchecked(ino);
        if node.mode == MODE_DIR {
            return Err(FsError::IsDir);
        }
        let mut txn = Txn::new();
        txn.set_word(self.dev, dentry_ctrl_off(page, slot), 0);
        let remaining = node.nlink.saturating_sub(1);
        self.log_append(&mut txn, ino, remaining);
        if remaining == 0 {
            self.cov.hit("op.unlink.last-link");
            txn.set_word(self.dev, inode_word0_off(ino), pack_mode_csum(MODE_FREE, 0));
        }
        self.commit_txn(txn);
        if remaining == 0 {
            for &p in node.direct.iter().filter(|&&p| p != 0) {
                self.free_page(p).expect("allocator initialized at mount");
            }
            self.free_inode(ino);
        }
        self.cov.hit("op.unlink.ok");
        Ok(())
    }

    pub fn link(&mut self, src: &str, dst: &str) -> Result<(), FsError> {
        let src_ino = self.resolve(src)?;
        if self.vs.corrupt.contains(&src_ino) {
            return Err(FsError::Corrupt);
        }
        let snode = self.read_inode_unchecked(src_ino);
        if snode.mode == MODE_DIR {
            return Err(FsError::IsDir);
        }
        let (ddir, dname) = self.resolve_parent(dst)?;
        let dnode = self.read_inode_unchecked(ddir);
        if self.lookup(&dnode, dname).is_some() {
            return Err(FsError::Exists);
        }
        let new_count = snode.nlink + 1;
        let mut txn = Txn::new();
        if self.faults.has(FaultId::LinkInplace) {
            // Fault: bump the link log in place, fenced, before the dentry
            // transaction. A crash in between shows one more link than
            // there are names.
            self.cov.hit("fault.link.inplace");
            let idx = (snode.log_count as usize).min(INODE_LOG_CAP).saturating_sub(1);
            let off = inode_log_entry_off(src_ino, idx);
            self.store_word(off, new_count as u64);
            self.flush_word(off);
            self.dev.sfence();
        } else {
            self.log_append(&mut txn, src_ino, new_count);
        }
        self.dentry_insert(&mut txn, ddir, dname, src_ino)?;
        self.commit_txn(txn);
        self.cov.hit("op.link.ok");
        Ok(())
    }

    pub fn rename(&mut self, src: &str, dst: &str) -> Result<(), FsError> {
        let (sdir, sname) = self.resolve_parent(src)?;
        let sdnode = self.read_inode_unchecked(sdir);
        let (src_ino, spage, sslot) =
            self.lookup(&sdnode, sname).ok_or(FsError::NotFound)?;
        let snode = self.read_inode_unchecked(src_ino);
        let (ddir, dname) = self.resolve_parent(dst)?;
        if src == dst {
            self.cov.hit("op.rename.same-path");
            return Ok(());
        }
        if snode.mode == MODE_DIR {
            let prefix = format!("{src}/");
            if dst.starts_with(&prefix) {
                return Err(FsError::Invalid);
            }
        }
        let dnode = self.read_inode_unchecked(ddir);
        let victim = self.lookup(&dnode, dname);
        if let Some((dst_ino, _, _)) = victim {
            if dst_ino == src_ino {
                self.cov.hit("op.rename.same-inode");
                return Ok(());
            }
            if self.vs.corrupt.contains(&dst_ino) {
                return Err(FsError::Corrupt);
            }
            let vnode = self.read_inode_unchecked(dst_ino);
            match (snode.mode == MODE_DIR, vnode.mode == MODE_DIR) {
                (false, true) => return Err(FsError::IsDir),
                (true, false) => return Err(FsError::NotDir),
                (true, true) => {
                    if !self.list_entries(&vnode).is_empty() {
                        return Err(FsError::NotEmpty);
                    }
                }
                (false, false) => {}
            }
        }
        if sdir != ddir {
            self.cov.hit("op.rename.cross-dir");
        }

        let mut txn = Txn::new();
        if self.faults.has(FaultId::RenameInplace) {
            // Fault: retire the source name in place, fenced, before the
            // transaction that publishes the destination. A crash in the
            // window loses the file from both names.
            self.cov.hit("fault.rename.inplace-clear");
            let off = dentry_ctrl_off(spage, sslot);
            self.store_word(off, 0);
            self.flush_word(off);
            self.dev.sfence();
        } else {
            txn.set_word(self.dev, dentry_ctrl_off(spage, sslot), 0);
        }
        match victim {
            Some((dst_ino, dpage, dslot)) => {
                let vnode = self.read_inode_unchecked(dst_ino);
                if self.faults.has(FaultId::RenameStaleOld) {
                    // Fault: point the existing destination entry at the
                    // source in place, fenced, before the transaction that
                    // clears the source name and drops the old target.
                    self.cov.hit("fault.rename.stale-old");
                    let off = dentry_ctrl_off(dpage, dslot);
                    self.store_word(off, pack_dentry_ctrl(src_ino, true));
                    self.flush_word(off);
                    self.dev.sfence();
                } else {
                    txn.set_word(
                        self.dev,
                        dentry_ctrl_off(dpage, dslot),
                        pack_dentry_ctrl(src_ino, true),
                    );
                }
                self.cov.hit("op.rename.overwrite");
                let remaining = vnode.nlink.saturating_sub(1);
                if vnode.mode == MODE_DIR || remaining == 0 {
                    txn.set_word(self.dev, inode_word0_off(dst_ino), pack_mode_csum(MODE_FREE, 0));
                    if vnode.mode != MODE_DIR {
                        self.log_append(&mut txn, dst_ino, 0);
                    }
                    self.commit_txn(txn);
                    for &p in vnode.direct.iter().filter(|&&p| p != 0) {
                        self.free_page(p).expect("allocator initialized at mount");
                    }
                    self.free_inode(dst_ino);
                } else {
                    self.log_append(&mut txn, dst_ino, remaining);
                    self.commit_txn(txn);
                }
            }
            None => {
                if self.faults.has(FaultId::RenameStaleOld) {
                    // Same fault, fresh destination: publish the new entry
                    // in place when a slot already exists in the directory.
                    if let Some((page, slot)) = self.find_free_slot(&dnode) {
                        self.cov.hit("fault.rename.stale-old");
                        let mut name_bytes = [0u8; NAME_MAX + 1];
                        name_bytes[..dname.len()].copy_from_slice(dname.as_bytes());
                        for (i, chunk) in name_bytes.chunks_exact(8).enumerate() {
                            let w = u64::from_le_bytes(chunk.try_into().unwrap());
                            self.store_word(dentry_off(page, slot) + i * 8, w);
                        }
                        self.store_word(
                            dentry_ctrl_off(page, slot),
                            pack_dentry_ctrl(src_ino, true),
                        );
                        self.dev
                            .flush_range(dentry_off(page, slot), DENTRY_SIZE)
                            .expect("in range");
                        self.dev.sfence();
                    } else {
                        self.dentry_insert(&mut txn, ddir, dname, src_ino)?;
                    }
                } else {
                    self.dentry_insert(&mut txn, ddir, dname, src_ino)?;
                }
                self.commit_txn(txn);
            }
        }
        self.cov.hit("op.rename.ok");
        Ok(())
    }

    /// First unused dentry slot in already-allocated pages of a directory.
    fn find_free_slot(&self, dir: &RawInode) -> Option<(usize, usize)> {
        for &p in dir.direct.iter() {
            if p == 0 {
                continue;
            }
            for slot in 0..DENTRIES_PER_PAGE {
                let (_, in_use) =
                    unpack_dentry_ctrl(self.read_word(dentry_ctrl_off(p as usize, slot)));
                if !in_use {
                    return Some((p as usize, slot));
                }
            }
        }
        None
    }

    /// Resolve a path that must be a live, non-corrupt regular file.
    fn resolve_file(&mut self, path: &str) -> Result<u32, FsError> {
        let ino = self.resolve(path)?;
        if self.vs.corrupt.contains(&ino) {
            return Err(FsError::Corrupt);
        }
        if self.read_inode_unchecked(ino).mode == MODE_DIR {
            return Err(FsError::IsDir);
        }
        Ok(ino)
    }

    pub fn pwrite(&mut self, path: &str, offset: u64, data: &[u8]) -> Result<(), FsError> {
        let ino = self.resolve_file(path)?;
        self.write_inode(ino, offset, data, None)
    }

    pub fn truncate(&mut self, path: &str, size: u64) -> Result<(), FsError> {
        let ino = self.resolve_file(path)?;
        if size > MAX_FILE_SIZE {
            return Err(FsError::TooBig);
        }
        let node = self.read_inode_unchecked(ino);
        if size == node.size {
            self.cov.hit("op.truncate.noop");
            return Ok(());
        }
        if size > node.size {
            // Growing: beyond-size bytes of allocated pages are zero by
            // invariant, so publishing the new size is the whole job.
            self.cov.hit("op.truncate.grow");
            let mut txn = Txn::new();
            txn.set_word(self.dev, inode_size_off(ino), size);
            self.commit_txn(txn);
            self.vs.file_sizes.insert(ino, size);
            return Ok(());
        }
        self.cov.hit("op.truncate.shrink");
        self.pend_truncate(ino)?;
        let mut txn = Txn::new();
        txn.set_word(self.dev, inode_size_off(ino), size);
        self.commit_txn(txn);
        self.vs.file_sizes.insert(ino, size);
        self.complete_truncate(ino).expect("allocator initialized at mount");
        // The list entry stays set; the next mount re-completes and clears
        // it, which is idempotent.
        Ok(())
    }

    /// Record `ino` in the pending-truncate list, fenced, reusing an entry
    /// already pointing at it.
    fn pend_truncate(&mut self, ino: u32) -> Result<(), FsError> {
        let mut free = None;
        for slot in 0..TRUNC_SLOTS {
            let v = self.read_word(trunc_slot_off(slot));
            if v == (ino as u64) + 1 {
                self.cov.hit("op.truncate.repend");
                return Ok(());
            }
            if v == 0 && free.is_none() {
                free = Some(slot);
            }
        }
        let slot = free.ok_or(FsError::NoSpace)?;
        self.cov.hit("op.truncate.pend");
        let off = trunc_slot_off(slot);
        self.store_word(off, (ino as u64) + 1);
        self.flush_word(off);
        self.dev.sfence();
        Ok(())
    }

    /// Enforce the truncate invariant for `ino` at its current size: zero
    /// the boundary page's tail, clear pointers wholly beyond the size, and
    /// free those pages. Runs at runtime right after the size commits and
    /// again from recovery replay; both paths are idempotent. The error is
    /// the page allocator being uninitialized, which only a reordered
    /// recovery can cause.
    fn complete_truncate(&mut self, ino: u32) -> Result<(), String> {
        let node = self.read_inode_unchecked(ino);
        let size = node.size;
        let tail = (size % PAGE_SIZE as u64) as usize;
        let boundary = (size / PAGE_SIZE as u64) as usize;
        if tail != 0 && boundary < N_DIRECT && node.direct[boundary] != 0 {
            self.cov.hit("op.truncate.tail-zero");
            let start = page_off(node.direct[boundary] as usize) + tail;
            self.dev.nt_memset(start, 0, PAGE_SIZE - tail).expect("in range");
            self.dev.sfence();
        }
        let first_free = ((size + PAGE_SIZE as u64 - 1) / PAGE_SIZE as u64) as usize;
        let mut txn = Txn::new();
        let mut freed = Vec::new();
        for k in first_free..N_DIRECT {
            if node.direct[k] != 0 {
                let woff = inode_direct_word_off(ino, k);
                let word = direct_into_word(txn.pending_word(self.dev, woff), k, 0);
                txn.set_word(self.dev, woff, word);
                freed.push(node.direct[k]);
            }
        }
        if !txn.is_empty() {
            self.cov.hit("op.truncate.release-pages");
            self.commit_txn(txn);
        }
        for p in freed {
            self.free_page(p)?;
        }
        Ok(())
    }

    pub fn fallocate(&mut self, path: &str, offset: u64, len: u64) -> Result<(), FsError> {
        let ino = self.resolve_file(path)?;
        if len == 0 {
            return Err(FsError::Invalid);
        }
        let end = offset.checked_add(len).ok_or(FsError::TooBig)?;
        if end > MAX_FILE_SIZE {
            return Err(FsError::TooBig);
        }
        let node = self.read_inode_unchecked(ino);
        let first = (offset / PAGE_SIZE as u64) as usize;
        let last = ((end - 1) / PAGE_SIZE as u64) as usize;
        let mut txn = Txn::new();
        let mut any = false;
        for k in first..=last {
            if node.direct[k] != 0 {
                continue;
            }
            let p = self.alloc_page()?;
            self.dev.nt_memset(page_off(p as usize), 0, PAGE_SIZE).expect("in range");
            any = true;
            let woff = inode_direct_word_off(ino, k);
            let word = direct_into_word(txn.pending_word(self.dev, woff), k, p);
            txn.set_word(self.dev, woff, word);
        }
        if any {
            self.dev.sfence();
            self.cov.hit("op.fallocate.alloc");
        } else {
            self.cov.hit("op.fallocate.noop");
        }
        self.commit_txn(txn);
        Ok(())
    }

    pub fn open(&mut self, path: &str) -> Result<u64, FsError> {
        let ino = self.resolve_file(path)?;
        let node = self.read_inode_unchecked(ino);
        let gen = self.vs.inode_gen.get(&ino).copied().unwrap_or(0);
        self.vs.handles.push(Some(Handle { ino, gen, local_size: node.size }));
        self.cov.hit("op.open.ok");
        Ok((self.vs.handles.len() - 1) as u64)
    }

    pub fn close(&mut self, handle: u64) -> Result<(), FsError> {
        let slot = self
            .vs
            .handles
            .get_mut(handle as usize)
            .ok_or(FsError::BadHandle)?;
        if slot.take().is_none() {
            return Err(FsError::BadHandle);
        }
        self.cov.hit("op.close.ok");
        Ok(())
    }

    pub fn write_fd(&mut self, handle: u64, offset: u64, data: &[u8]) -> Result<(), FsError> {
        let h = self
            .vs
            .handles
            .get(handle as usize)
            .copied()
            .flatten()
            .ok_or(FsError::BadHandle)?;
        // A handle whose file was fully unlinked (or whose inode was
        // recycled) is dead; the model applies the same rule.
        if self.vs.inode_gen.get(&h.ino).copied().unwrap_or(0) != h.gen {
            return Err(FsError::BadHandle);
        }
        self.cov.hit("op.writefd.ok");
        self.write_inode(h.ino, offset, data, Some(handle as usize))
    }

    /// Shared write path. `handle_idx` is set for handle-based writes, which
    /// the stale-size fault diverts to the handle's private size.
    fn write_inode(
        &mut self,
        ino: u32,
        offset: u64,
        data: &[u8],
        handle_idx: Option<usize>,
    ) -> Result<(), FsError> {
        if data.is_empty() {
            self.cov.hit("op.write.empty");
            return Ok(());
        }
        let end = offset.checked_add(data.len() as u64).ok_or(FsError::TooBig)?;
        if end > MAX_FILE_SIZE {
            return Err(FsError::TooBig);
        }
        let node = self.read_inode_unchecked(ino);
        let cur_size = node.size;

        // Size the call publishes. The stale-size fault tracks the handle's
        // private view instead of the inode's current size.
        let mut new_size = cur_size.max(end);
        if let Some(idx) = handle_idx {
            if self.faults.has(FaultId::HandleStaleSize) {
                let local = self.vs.handles[idx].as_ref().unwrap().local_size;
                let stale = local.max(end);
                if stale != new_size {
                    self.cov.hit("fault.writefd.stale-size");
                }
                new_size = stale;
                self.vs.handles[idx].as_mut().unwrap().local_size = stale;
            } else {
                self.vs.handles[idx].as_mut().unwrap().local_size = new_size;
            }
        }

        let first = (offset / PAGE_SIZE as u64) as usize;
        let last = ((end - 1) / PAGE_SIZE as u64) as usize;
        let in_place = first == last && node.direct[first] != 0 && end <= cur_size;
        if in_place {
            // One allocated page, no size change: a single coalescible
            // non-temporal burst, then a fence. The missing-fence fault
            // drops the fence and lets the call return with the data still
            // in flight.
            self.cov.hit("op.write.inplace");
            let dst = page_off(node.direct[first] as usize) + (offset % PAGE_SIZE as u64) as usize;
            self.dev.nt_memcpy(dst, data).expect("in range");
            if self.faults.has(FaultId::MissingFenceWrite) {
                self.cov.hit("fault.write.skip-fence");
            } else {
                self.dev.sfence();
            }
            if new_size != cur_size {
                let mut txn = Txn::new();
                txn.set_word(self.dev, inode_size_off(ino), new_size);
                self.commit_txn(txn);
                self.vs.file_sizes.insert(ino, new_size);
            }
            return Ok(());
        }

        // Copy-on-write: build every touched page fresh, land it with
        // non-temporal copies, fence, then swap all pointers and the size in
        // one transaction.
        self.cov.hit("op.write.cow");
        if end > cur_size {
            self.cov.hit("op.write.extend");
        }
        if last > first {
            self.cov.hit("op.write.multipage");
        }
        let mut txn = Txn::new();
        let mut replaced = Vec::new();
        for k in first..=last {
            let mut page = [0u8; PAGE_SIZE];
            if node.direct[k] != 0 {
                let src = self
                    .dev
                    .read(page_off(node.direct[k] as usize), PAGE_SIZE)
                    .expect("in range");
                page.copy_from_slice(src);
            }
            let pstart = k as u64 * PAGE_SIZE as u64;
            let from = offset.max(pstart);
            let to = end.min(pstart + PAGE_SIZE as u64);
            page[(from - pstart) as usize..(to - pstart) as usize]
                .copy_from_slice(&data[(from - offset) as usize..(to - offset) as usize]);
            // Keep the beyond-size invariant: zero anything past the new
            // size within this page.
            if new_size < pstart + PAGE_SIZE as u64 {
                let cut = (new_size.max(pstart) - pstart) as usize;
                for b in &mut page[cut..] {
                    *b = 0;
                }
            }
            let p = self.alloc_page()?;
            self.dev.nt_memcpy(page_off(p as usize), &page).expect("in range");
            if node.direct[k] != 0 {
                replaced.push(node.direct[k]);
            }
            let woff = inode_direct_word_off(ino, k);
            let word = direct_into_word(txn.pending_word(self.dev, woff), k, p);
            txn.set_word(self.dev, woff, word);
        }
        self.dev.sfence();
        if new_size != cur_size {
            txn.set_word(self.dev, inode_size_off(ino), new_size);
        }
        self.commit_txn(txn);
        self.vs.file_sizes.insert(ino, new_size);
        for p in replaced {
            self.free_page(p).expect("allocator initialized at mount");
        }
        Ok(())
    }

    // ---- read side --------------------------------------------------------

    pub fn stat(&mut self, path: &str) -> Result<Stat, FsError> {
        if path.is_empty() {
            return Ok(Stat { is_dir: true, size: 0, nlink: 1 });
        }
        let ino = self.resolve(path)?;
        if self.vs.corrupt.contains(&ino) {
            return Err(FsError::Corrupt);
        }
        let node = self.read_inode_unchecked(ino);
        Ok(Stat { is_dir: node.mode == MODE_DIR, size: node.size, nlink: node.nlink })
    }

    /// Full file content; holes read as zeros and allocated tails are
    /// clipped at the size.
    pub fn read_file(&mut self, path: &str) -> Result<Vec<u8>, FsError> {
        let ino = self.resolve(path)?;
        if self.vs.corrupt.contains(&ino) {
            return Err(FsError::Corrupt);
        }
        let node = self.read_inode_unchecked(ino);
        if node.mode == MODE_DIR {
            return Err(FsError::IsDir);
        }
        let mut out = vec![0u8; node.size as usize];
        for k in 0..N_DIRECT {
            if node.direct[k] == 0 {
                continue;
            }
            let pstart = k * PAGE_SIZE;
            if pstart >= out.len() {
                continue;
            }
            let take = (out.len() - pstart).min(PAGE_SIZE);
            let src = self
                .dev
                .read(page_off(node.direct[k] as usize), take)
                .expect("in range");
            out[pstart..pstart + take].copy_from_slice(src);
        }
        Ok(out)
    }

    /// Live names in a directory, sorted.
    pub fn readdir(&mut self, path: &str) -> Result<Vec<String>, FsError> {
        let ino = if path.is_empty() { ROOT_INO } else { self.resolve(path)? };
        if self.vs.corrupt.contains(&ino) {
            return Err(FsError::Corrupt);
        }
        let node = self.read_inode_unchecked(ino);
        if node.mode != MODE_DIR {
            return Err(FsError::NotDir);
        }
        let mut names: Vec<String> =
            self.list_entries(&node).into_iter().map(|(_, _, _, n)| n).collect();
        names.sort();
        Ok(names)
    }
}

fn touched_inodes(txn: &Txn) -> BTreeSet<u32> {
    let table = inode_off(0);
    let end = table + INODE_COUNT * INODE_SIZE;
    txn.entries()
        .iter()
        .filter(|e| e.offset >= table && e.offset < end)
        .map(|e| ((e.offset - table) / INODE_SIZE) as u32)
        .collect()
}

fn err_edge(e: FsError) -> &'static str {
    match e {
        FsError::NotFound => "op.err.notfound",
        FsError::Exists => "op.err.exists",
        FsError::NotDir => "op.err.notdir",
        FsError::IsDir => "op.err.isdir",
        FsError::NotEmpty => "op.err.notempty",
        FsError::NoSpace => "op.err.nospace",
        FsError::TooBig => "op.err.toobig",
        FsError::NameTooLong => "op.err.nametoolong",
        FsError::BadHandle => "op.err.badhandle",
        FsError::Invalid => "op.err.invalid",
        FsError::Corrupt => "op.err.corrupt",
    }
}
