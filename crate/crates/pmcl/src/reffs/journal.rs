//! Word-granular redo journal. A transaction collects (offset, old, new)
//! word records, persists them in a journal slot, commits with a single
//! fenced state-word store, then applies the new values in place. The apply
//! phase needs no fence of its own: a committed slot is redone idempotently
//! by the next mount, and the slot is released at the next commit's fence,
//! the first point where its apply stores are provably durable. Recovery
//! discards uncommitted slots and redoes committed ones in commit order (a
//! crash inside the commit fence can leave two live slots touching the same
//! word, and only sequence order makes redo converge on the newest value),
//! so a crash anywhere leaves each transaction all-or-nothing.

use std::collections::{BTreeSet, HashMap};

use crate::cov::CovSet;
use crate::pmem::PmDevice;
use crate::reffs::layout::{
    self, JOURNAL_COMMIT_MAGIC, JOURNAL_ENTRY_CAP, JOURNAL_ENTRY_SIZE,
};

/// Structural damage found while scanning a journal slot. The slot contents
/// could not have been produced by the commit protocol.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("journal slot {slot}: {msg}")]
pub struct JournalCorrupt {
    pub slot: usize,
    pub msg: String,
}

#[derive(Debug, Clone, Copy)]
pub struct TxnEntry {
    pub offset: usize,
    pub old: u64,
    pub new: u64,
}

/// An open transaction. Entries target 8-byte-aligned words; a second write
/// to the same word folds into the first entry so replay order within the
/// slot never matters. The journal slot is picked at commit time.
#[derive(Default)]
pub struct Txn {
    entries: Vec<TxnEntry>,
    by_offset: HashMap<usize, usize>,
}

impl Txn {
    pub fn new() -> Txn {
        Txn::default()
    }

    pub fn entries(&self) -> &[TxnEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Value the word at `offset` will have after this transaction applies.
    pub fn pending_word(&self, dev: &PmDevice, offset: usize) -> u64 {
        debug_assert_eq!(offset % 8, 0);
        match self.by_offset.get(&offset) {
            Some(&i) => self.entries[i].new,
            None => dev.read_u64(offset).expect("word in range"),
        }
    }

    /// Record a word write. The old value is captured at first touch.
    pub fn set_word(&mut self, dev: &PmDevice, offset: usize, new: u64) {
        debug_assert_eq!(offset % 8, 0);
        match self.by_offset.get(&offset) {
            Some(&i) => self.entries[i].new = new,
            None => {
                let old = dev.read_u64(offset).expect("word in range");
                self.by_offset.insert(offset, self.entries.len());
                self.entries.push(TxnEntry { offset, old, new });
            }
        }
    }

    /// Record an aligned byte-range write as word entries. `offset` and the
    /// data length must be multiples of 8.
    pub fn set_bytes(&mut self, dev: &PmDevice, offset: usize, data: &[u8]) {
        debug_assert_eq!(offset % 8, 0);
        debug_assert_eq!(data.len() % 8, 0);
        for (i, chunk) in data.chunks_exact(8).enumerate() {
            let word = u64::from_le_bytes(chunk.try_into().unwrap());
            self.set_word(dev, offset + i * 8, word);
        }
    }

    /// Persist the entries into `slot`, commit, and apply in place. The
    /// caller must hand over a slot whose state word is zero. The apply
    /// stores are flushed but not fenced here: any later fence retires them,
    /// and until one does, the committed slot makes redo reconstruct them.
    pub fn commit(self, dev: &mut PmDevice, slot: usize, seq: u64, cov: &mut CovSet) {
        if self.entries.is_empty() {
            cov.hit("txn.commit.empty");
            return;
        }
        assert!(
            self.entries.len() <= JOURNAL_ENTRY_CAP,
            "transaction exceeds journal slot capacity"
        );
        debug_assert_eq!(
            dev.read_u64(layout::journal_slot_off(slot) + layout::JOURNAL_STATE_OFF)
                .expect("in range"),
            0,
            "journal slot handed to commit while still committed"
        );
        cov.hit("txn.commit");
        let slot_off = layout::journal_slot_off(slot);
        let mut lines: BTreeSet<usize> = BTreeSet::new();
        let line = dev.line_size();
        // Phase 1: entry records and the transaction sequence, then fence.
        for (i, e) in self.entries.iter().enumerate() {
            let off = layout::journal_entry_off(slot, i);
            dev.store_u64(off, e.offset as u64).expect("journal in range");
            dev.store_u64(off + 8, e.old).expect("journal in range");
            dev.store_u64(off + 16, e.new).expect("journal in range");
            lines.insert(off / line * line);
            lines.insert((off + JOURNAL_ENTRY_SIZE - 1) / line * line);
        }
        dev.store_u64(slot_off + layout::JOURNAL_SEQ_OFF, seq)
            .expect("journal in range");
        lines.insert((slot_off + layout::JOURNAL_SEQ_OFF) / line * line);
        for l in &lines {
            dev.flush_line(*l).expect("aligned");
        }
        dev.sfence();
        // Phase 2: commit word, fence. From here the transaction is durable.
        // The previous transaction's apply stores were retired by the phase 1
        // fence just above, so its slot is released in the same batch; at any
        // fence, the only committed slot left is the one covering apply
        // stores that may still be in flight.
        let state = layout::pack_journal_state(self.entries.len() as u32, true);
        dev.store_u64(slot_off + layout::JOURNAL_STATE_OFF, state)
            .expect("journal in range");
        dev.flush_line(slot_off / line * line).expect("aligned");
        debug_assert_eq!(layout::JOURNAL_COUNT, 2);
        let other_off = layout::journal_slot_off(slot ^ 1);
        if dev.read_u64(other_off + layout::JOURNAL_STATE_OFF).expect("in range") != 0 {
            dev.store_u64(other_off + layout::JOURNAL_STATE_OFF, 0)
                .expect("journal in range");
            dev.flush_line(other_off / line * line).expect("aligned");
        }
        dev.sfence();
        // Phase 3: in-place application; flushed, fence deferred.
        let mut target_lines: BTreeSet<usize> = BTreeSet::new();
        for e in &self.entries {
            dev.store_u64(e.offset, e.new).expect("txn target in range");
            target_lines.insert(e.offset / line * line);
        }
        for l in &target_lines {
            dev.flush_line(*l).expect("aligned");
        }
    }
}

/// What a journal slot holds on mount.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotClass {
    Idle,
    /// Nonzero state word without the commit magic: a commit interrupted
    /// before its fence. The transaction never happened.
    Interrupted,
    Committed { seq: u64, count: u32 },
}

pub fn classify_slot(dev: &PmDevice, slot: usize) -> SlotClass {
    let slot_off = layout::journal_slot_off(slot);
    let state = dev.read_u64(slot_off + layout::JOURNAL_STATE_OFF).expect("in range");
    if state == 0 {
        return SlotClass::Idle;
    }
    let (count, magic) = layout::unpack_journal_state(state);
    if magic != JOURNAL_COMMIT_MAGIC {
        return SlotClass::Interrupted;
    }
    let seq = dev.read_u64(slot_off + layout::JOURNAL_SEQ_OFF).expect("in range");
    SlotClass::Committed { seq, count }
}

fn clear_state(dev: &mut PmDevice, slot: usize) {
    let slot_off = layout::journal_slot_off(slot);
    let line = dev.line_size();
    dev.store_u64(slot_off + layout::JOURNAL_STATE_OFF, 0).expect("in range");
    dev.flush_line(slot_off / line * line).expect("aligned");
    dev.sfence();
}

/// Redo the `count` entries recorded in `src`, fenced.
fn redo_entries(
    dev: &mut PmDevice,
    src: usize,
    count: u32,
    cov: &mut CovSet,
) -> Result<(), JournalCorrupt> {
    cov.hit("recovery.journal.redo");
    let line = dev.line_size();
    let mut lines: BTreeSet<usize> = BTreeSet::new();
    for i in 0..count as usize {
        let off = layout::journal_entry_off(src, i);
        let target = dev.read_u64(off).expect("in range") as usize;
        let new = dev.read_u64(off + 16).expect("in range");
        if target % 8 != 0 || target + 8 > dev.capacity() {
            return Err(JournalCorrupt {
                slot: src,
                msg: format!("entry {i} targets invalid offset {target}"),
            });
        }
        dev.store_u64(target, new).expect("validated");
        lines.insert(target / line * line);
    }
    for l in &lines {
        dev.flush_line(*l).expect("aligned");
    }
    dev.sfence();
    Ok(())
}

/// Mount-time recovery over every slot: discard interrupted commits, then
/// redo committed transactions in commit order and release their slots.
/// `redirect` makes every redo read its entries from that slot instead of
/// the one being recovered, modeling an indexing bug; correct recovery
/// passes `None`. Returns how many transactions were redone.
pub fn recover_all(
    dev: &mut PmDevice,
    redirect: Option<usize>,
    cov: &mut CovSet,
) -> Result<usize, JournalCorrupt> {
    let mut committed: Vec<(u64, usize)> = Vec::new();
    for slot in 0..layout::JOURNAL_COUNT {
        match classify_slot(dev, slot) {
            SlotClass::Idle => cov.hit("recovery.journal.idle"),
            SlotClass::Interrupted => {
                cov.hit("recovery.journal.discard");
                clear_state(dev, slot);
            }
            SlotClass::Committed { seq, count } => {
                if count as usize > JOURNAL_ENTRY_CAP {
                    return Err(JournalCorrupt {
                        slot,
                        msg: format!("committed entry count {count} exceeds capacity"),
                    });
                }
                committed.push((seq, slot));
            }
        }
    }
    committed.sort_unstable();
    let mut redone = 0;
    for &(_, slot) in &committed {
        let src = redirect.unwrap_or(slot);
        match classify_slot(dev, src) {
            SlotClass::Committed { count, .. } if (count as usize) <= JOURNAL_ENTRY_CAP => {
                redo_entries(dev, src, count, cov)?;
                redone += 1;
            }
            // Redirected into a slot with nothing committed: this
            // transaction's updates are silently lost.
            _ => cov.hit("recovery.journal.redo-missing"),
        }
        clear_state(dev, slot);
    }
    Ok(redone)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pmem::MIN_CAPACITY;

    fn dev() -> PmDevice {
        PmDevice::new(MIN_CAPACITY, 64).unwrap()
    }

    #[test]
    fn commit_applies_and_leaves_slot_committed() {
        let mut d = dev();
        let mut cov = CovSet::new();
        let target = layout::page_off(layout::DATA_PAGE);
        let mut txn = Txn::new();
        txn.set_word(&d, target, 0xdead_beef);
        txn.set_word(&d, target + 8, 0x1234);
        txn.commit(&mut d, 0, 1, &mut cov);
        assert_eq!(d.read_u64(target).unwrap(), 0xdead_beef);
        assert_eq!(d.read_u64(target + 8).unwrap(), 0x1234);
        let state =
            d.read_u64(layout::journal_slot_off(0) + layout::JOURNAL_STATE_OFF).unwrap();
        let (count, magic) = layout::unpack_journal_state(state);
        assert_eq!((count, magic), (2, JOURNAL_COMMIT_MAGIC));
        assert!(cov.contains("txn.commit"));
        // Apply stores are unfenced: the persistent image still has the old
        // values, and the committed slot is what reconstructs them.
        let pre_fence = u64::from_le_bytes(d.persistent()[target..target + 8].try_into().unwrap());
        assert_eq!(pre_fence, 0);
        d.sfence();
        let post_fence =
            u64::from_le_bytes(d.persistent()[target..target + 8].try_into().unwrap());
        assert_eq!(post_fence, 0xdead_beef);
    }

    #[test]
    fn redo_of_already_applied_commit_is_idempotent() {
        let mut d = dev();
        let mut cov = CovSet::new();
        let target = layout::page_off(layout::DATA_PAGE);
        let mut txn = Txn::new();
        txn.set_word(&d, target, 42);
        txn.commit(&mut d, 0, 1, &mut cov);
        d.sfence();
        assert_eq!(recover_all(&mut d, None, &mut cov).unwrap(), 1);
        assert_eq!(d.read_u64(target).unwrap(), 42);
        // Recovery released the slot.
        let st = layout::journal_slot_off(0) + layout::JOURNAL_STATE_OFF;
        assert_eq!(d.read_u64(st).unwrap(), 0);
    }

    #[test]
    fn commit_releases_the_previous_slot() {
        let mut d = dev();
        let mut cov = CovSet::new();
        let target = layout::page_off(layout::DATA_PAGE);
        let mut a = Txn::new();
        a.set_word(&d, target, 1);
        a.commit(&mut d, 0, 1, &mut cov);
        assert!(matches!(classify_slot(&d, 0), SlotClass::Committed { seq: 1, .. }));
        let mut b = Txn::new();
        b.set_word(&d, target + 8, 2);
        b.commit(&mut d, 1, 2, &mut cov);
        // b's commit fence retired a's apply stores, so a's slot is gone and
        // only b's remains to cover its own in-flight apply.
        assert_eq!(classify_slot(&d, 0), SlotClass::Idle);
        assert!(matches!(classify_slot(&d, 1), SlotClass::Committed { seq: 2, .. }));
        assert_eq!(recover_all(&mut d, None, &mut cov).unwrap(), 1);
        assert_eq!(d.read_u64(target).unwrap(), 1);
        assert_eq!(d.read_u64(target + 8).unwrap(), 2);
    }

    #[test]
    fn committed_slots_redo_in_commit_order_not_slot_order() {
        let target = layout::page_off(layout::DATA_PAGE);
        // Same word written by two committed transactions. Arrange the newer
        // one in the lower slot, then the reverse, and expect the newest
        // value both times.
        for (slots, want) in [([(0usize, 5u64, 20u64), (1, 4, 10)], 20), ([(0, 4, 10), (1, 5, 20)], 20)]
        {
            let mut d = dev();
            let mut cov = CovSet::new();
            for (slot, seq, value) in slots {
                let e = layout::journal_entry_off(slot, 0);
                d.store_u64(e, target as u64).unwrap();
                d.store_u64(e + 8, 0).unwrap();
                d.store_u64(e + 16, value).unwrap();
                let off = layout::journal_slot_off(slot);
                d.store_u64(off + layout::JOURNAL_SEQ_OFF, seq).unwrap();
                d.flush_range(e, JOURNAL_ENTRY_SIZE).unwrap();
                d.flush_range(off, 16).unwrap();
                d.sfence();
                d.store_u64(off + layout::JOURNAL_STATE_OFF, layout::pack_journal_state(1, true))
                    .unwrap();
                d.flush_range(off, 8).unwrap();
                d.sfence();
            }
            assert_eq!(recover_all(&mut d, None, &mut cov).unwrap(), 2);
            assert_eq!(d.read_u64(target).unwrap(), want);
        }
    }

    #[test]
    fn redirected_recovery_loses_the_other_slots_transaction() {
        let mut d = dev();
        let mut cov = CovSet::new();
        let t0 = layout::page_off(layout::DATA_PAGE);
        let t1 = t0 + 64;
        // Two committed slots, neither applied, as left by a crash inside
        // the second commit's fence before the release store landed.
        for (slot, seq, target, value) in [(0usize, 1u64, t0, 7u64), (1, 2, t1, 9)] {
            let e = layout::journal_entry_off(slot, 0);
            d.store_u64(e, target as u64).unwrap();
            d.store_u64(e + 8, 0).unwrap();
            d.store_u64(e + 16, value).unwrap();
            let off = layout::journal_slot_off(slot);
            d.store_u64(off + layout::JOURNAL_SEQ_OFF, seq).unwrap();
            d.flush_range(e, JOURNAL_ENTRY_SIZE).unwrap();
            d.flush_range(off, 16).unwrap();
            d.sfence();
            d.store_u64(off + layout::JOURNAL_STATE_OFF, layout::pack_journal_state(1, true))
                .unwrap();
            d.flush_range(off, 8).unwrap();
            d.sfence();
        }
        // Slot 0 redoes itself and is released; slot 1's redo then reads the
        // released slot 0 and finds nothing, so its transaction is lost.
        assert_eq!(recover_all(&mut d, Some(0), &mut cov).unwrap(), 1);
        assert_eq!(d.read_u64(t0).unwrap(), 7);
        assert_eq!(d.read_u64(t1).unwrap(), 0);
        assert!(cov.contains("recovery.journal.redo-missing"));
        for slot in 0..layout::JOURNAL_COUNT {
            assert_eq!(classify_slot(&d, slot), SlotClass::Idle);
        }
    }

    #[test]
    fn same_word_twice_folds() {
        let d = dev();
        let target = layout::page_off(layout::DATA_PAGE);
        let mut txn = Txn::new();
        txn.set_word(&d, target, 1);
        txn.set_word(&d, target, 2);
        assert_eq!(txn.entries().len(), 1);
        assert_eq!(txn.entries()[0].old, 0);
        assert_eq!(txn.entries()[0].new, 2);
        assert_eq!(txn.pending_word(&d, target), 2);
    }

    #[test]
    fn recovery_redoes_committed_slot() {
        let mut d = dev();
        let mut cov = CovSet::new();
        let target = layout::page_off(layout::DATA_PAGE) + 16;
        // Build the slot by hand: entries fenced, commit word fenced, but no
        // in-place apply, as if the crash hit right after commit.
        let e = layout::journal_entry_off(1, 0);
        d.store_u64(e, target as u64).unwrap();
        d.store_u64(e + 8, 0).unwrap();
        d.store_u64(e + 16, 77).unwrap();
        d.flush_range(e, JOURNAL_ENTRY_SIZE).unwrap();
        d.sfence();
        let st = layout::journal_slot_off(1) + layout::JOURNAL_STATE_OFF;
        d.store_u64(st, layout::pack_journal_state(1, true)).unwrap();
        d.flush_range(st, 8).unwrap();
        d.sfence();

        assert_eq!(recover_all(&mut d, None, &mut cov).unwrap(), 1);
        assert_eq!(d.read_u64(target).unwrap(), 77);
        assert_eq!(d.read_u64(st).unwrap(), 0);
        assert!(cov.contains("recovery.journal.redo"));
        assert!(cov.contains("recovery.journal.idle"));
    }

    #[test]
    fn recovery_discards_uncommitted_slot() {
        let mut d = dev();
        let mut cov = CovSet::new();
        let st = layout::journal_slot_off(0) + layout::JOURNAL_STATE_OFF;
        // Entry count present but no commit magic: interrupted phase 1.
        d.store_u64(st, layout::pack_journal_state(3, false) | 5).unwrap();
        d.flush_range(st, 8).unwrap();
        d.sfence();
        assert_eq!(recover_all(&mut d, None, &mut cov).unwrap(), 0);
        assert_eq!(d.read_u64(st).unwrap(), 0);
        assert!(cov.contains("recovery.journal.discard"));
    }

    #[test]
    fn recovery_rejects_impossible_entry_count() {
        let mut d = dev();
        let mut cov = CovSet::new();
        let st = layout::journal_slot_off(0) + layout::JOURNAL_STATE_OFF;
        d.store_u64(st, layout::pack_journal_state(9999, true)).unwrap();
        d.flush_range(st, 8).unwrap();
        d.sfence();
        let err = recover_all(&mut d, None, &mut cov).unwrap_err();
        assert!(err.msg.contains("exceeds capacity"));
    }

    #[test]
    fn recovery_rejects_out_of_range_target() {
        let mut d = dev();
        let mut cov = CovSet::new();
        let e = layout::journal_entry_off(0, 0);
        d.store_u64(e, u64::MAX / 2).unwrap();
        d.store_u64(e + 16, 1).unwrap();
        let st = layout::journal_slot_off(0) + layout::JOURNAL_STATE_OFF;
        d.store_u64(st, layout::pack_journal_state(1, true)).unwrap();
        d.flush_range(e, 24).unwrap();
        d.flush_range(st, 8).unwrap();
        d.sfence();
        let err = recover_all(&mut d, None, &mut cov).unwrap_err();
        assert!(err.msg.contains("invalid offset"));
    }
}
