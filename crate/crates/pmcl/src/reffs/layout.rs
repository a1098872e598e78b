//! On-media layout: fixed geometry, field offsets, and codec helpers.
//!
//! The media is divided into 4096-byte pages:
//!
//! ```text
//! page 0              superblock
//! pages 1..=4         inode table (128 inodes x 128 bytes)
//! pages 5..=6         journal slots 0 and 1 (one page each)
//! page 7              pending-truncate list
//! pages 8..           data pages
//! ```
//!
//! All multi-byte fields are little-endian. Mutations to metadata go through
//! journaled 8-byte word writes, so every field is addressed here by the
//! 8-byte word that contains it.

/// Bump when any constant below changes; embedded in the superblock and in
/// the build id reports carry.
pub const LAYOUT_VERSION: u32 = 1;

pub const PAGE_SIZE: usize = 4096;
pub const INODE_SIZE: usize = 128;
pub const INODE_COUNT: usize = 128;
pub const JOURNAL_COUNT: usize = 2;
pub const N_DIRECT: usize = 8;
/// Largest representable file: all direct slots full.
pub const MAX_FILE_SIZE: u64 = (N_DIRECT * PAGE_SIZE) as u64;
/// Longest file name storable in a directory entry (one byte reserved so a
/// full-length name is still NUL-terminated in the slot).
pub const NAME_MAX: usize = 23;
pub const DENTRY_SIZE: usize = 32;
pub const DENTRIES_PER_PAGE: usize = PAGE_SIZE / DENTRY_SIZE;
pub const ROOT_INO: u32 = 0;

pub const SB_MAGIC: u32 = 0x5346_4552; // "REFS" little-endian
const INODE_TABLE_PAGES: usize = INODE_COUNT * INODE_SIZE / PAGE_SIZE;

/// First inode-table page.
pub const INODE_TABLE_PAGE: usize = 1;
/// First journal page; slot k lives at `JOURNAL_PAGE + k`.
pub const JOURNAL_PAGE: usize = INODE_TABLE_PAGE + INODE_TABLE_PAGES;
/// Pending-truncate list page.
pub const TRUNC_PAGE: usize = JOURNAL_PAGE + JOURNAL_COUNT;
/// First data page.
pub const DATA_PAGE: usize = TRUNC_PAGE + 1;

/// Superblock field offsets (u32 each, packed into the first pages's words).
pub const SB_MAGIC_OFF: usize = 0;
pub const SB_VERSION_OFF: usize = 4;
pub const SB_PAGE_SIZE_OFF: usize = 8;
pub const SB_PAGE_COUNT_OFF: usize = 12;
pub const SB_INODE_COUNT_OFF: usize = 16;
pub const SB_CHECKSUM_MODE_OFF: usize = 20;

/// Journal slot layout, relative to the slot's page start. The state word is
/// written last on commit: low 32 bits hold the entry count, high 32 bits the
/// commit marker. Entries are 24 bytes: media offset, old word, new word.
pub const JOURNAL_STATE_OFF: usize = 0;
pub const JOURNAL_SEQ_OFF: usize = 8;
pub const JOURNAL_ENTRIES_OFF: usize = 64;
pub const JOURNAL_ENTRY_SIZE: usize = 24;
pub const JOURNAL_ENTRY_CAP: usize = (PAGE_SIZE - JOURNAL_ENTRIES_OFF) / JOURNAL_ENTRY_SIZE;
pub const JOURNAL_COMMIT_MAGIC: u32 = 0x4a43_4d54; // "TMCJ"

/// Pending-truncate list: one u64 per slot, zero when free, `ino + 1` when a
/// truncate for `ino` has been logged but not completed.
pub const TRUNC_SLOTS: usize = PAGE_SIZE / 8;

/// Inode field layout (offsets within the 128-byte inode).
///
/// ```text
/// word 0   mode (low 32) | checksum (high 32)
/// word 1   size in bytes
/// words 2..6   direct page numbers, two u32 per word, 0 = hole
/// word 6   link-log entry count (low 32)
/// words 7..16  link log: each entry's low 32 bits are the link count
/// ```
pub const INODE_WORD0: usize = 0;
pub const INODE_SIZE_OFF: usize = 8;
pub const INODE_DIRECT_OFF: usize = 16;
pub const INODE_LOG_COUNT_OFF: usize = 48;
pub const INODE_LOG_OFF: usize = 56;
pub const INODE_LOG_CAP: usize = (INODE_SIZE - INODE_LOG_OFF) / 8;

pub const MODE_FREE: u32 = 0;
pub const MODE_FILE: u32 = 1;
pub const MODE_DIR: u32 = 2;

pub fn page_off(page: usize) -> usize {
    page * PAGE_SIZE
}

pub fn inode_off(ino: u32) -> usize {
    INODE_TABLE_PAGE * PAGE_SIZE + ino as usize * INODE_SIZE
}

pub fn inode_word0_off(ino: u32) -> usize {
    inode_off(ino) + INODE_WORD0
}

pub fn inode_size_off(ino: u32) -> usize {
    inode_off(ino) + INODE_SIZE_OFF
}

/// Offset of the u64 word holding direct slot `k` (two slots per word).
pub fn inode_direct_word_off(ino: u32, k: usize) -> usize {
    inode_off(ino) + INODE_DIRECT_OFF + (k / 2) * 8
}

pub fn inode_log_count_off(ino: u32) -> usize {
    inode_off(ino) + INODE_LOG_COUNT_OFF
}

pub fn inode_log_entry_off(ino: u32, idx: usize) -> usize {
    inode_off(ino) + INODE_LOG_OFF + idx * 8
}

pub fn journal_slot_off(slot: usize) -> usize {
    (JOURNAL_PAGE + slot) * PAGE_SIZE
}

pub fn journal_entry_off(slot: usize, idx: usize) -> usize {
    journal_slot_off(slot) + JOURNAL_ENTRIES_OFF + idx * JOURNAL_ENTRY_SIZE
}

pub fn trunc_slot_off(slot: usize) -> usize {
    TRUNC_PAGE * PAGE_SIZE + slot * 8
}

pub fn dentry_off(page: usize, slot: usize) -> usize {
    page_off(page) + slot * DENTRY_SIZE
}

/// Offset of the dentry's control word: inode number in the low 32 bits,
/// in-use flag in the high 32. The name occupies the 24 bytes before it, so
/// publishing an entry is a single word store after the name words.
pub fn dentry_ctrl_off(page: usize, slot: usize) -> usize {
    dentry_off(page, slot) + NAME_MAX + 1
}

pub fn pack_dentry_ctrl(ino: u32, in_use: bool) -> u64 {
    (ino as u64) | ((in_use as u64) << 32)
}

pub fn unpack_dentry_ctrl(word: u64) -> (u32, bool) {
    (word as u32, (word >> 32) & 1 == 1)
}

pub fn pack_mode_csum(mode: u32, csum: u32) -> u64 {
    (mode as u64) | ((csum as u64) << 32)
}

pub fn unpack_mode_csum(word: u64) -> (u32, u32) {
    (word as u32, (word >> 32) as u32)
}

pub fn pack_journal_state(count: u32, committed: bool) -> u64 {
    let hi = if committed { JOURNAL_COMMIT_MAGIC as u64 } else { 0 };
    (count as u64) | (hi << 32)
}

pub fn unpack_journal_state(word: u64) -> (u32, u32) {
    (word as u32, (word >> 32) as u32)
}

/// Direct slot `k` inside its containing word: low half for even `k`.
pub fn direct_from_word(word: u64, k: usize) -> u32 {
    if k % 2 == 0 {
        word as u32
    } else {
        (word >> 32) as u32
    }
}

pub fn direct_into_word(word: u64, k: usize, page: u32) -> u64 {
    if k % 2 == 0 {
        (word & 0xffff_ffff_0000_0000) | page as u64
    } else {
        (word & 0x0000_0000_ffff_ffff) | ((page as u64) << 32)
    }
}

/// Inode checksum: hash of the 128 inode bytes with the checksum field
/// itself zeroed, folded to 32 bits.
pub fn inode_checksum(bytes: &[u8]) -> u32 {
    debug_assert_eq!(bytes.len(), INODE_SIZE);
    let mut h = crate::hash::Fnv64::new();
    h.update(&bytes[..4]);
    h.update(&[0, 0, 0, 0]);
    h.update(&bytes[8..]);
    let v = h.finish();
    (v as u32) ^ ((v >> 32) as u32)
}

/// Number of pages a capacity provides, with a floor that guarantees a
/// non-trivial data region.
pub fn page_count_for(capacity: usize) -> usize {
    capacity / PAGE_SIZE
}

pub const MIN_DATA_PAGES: usize = 64;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn region_map_is_contiguous() {
        assert_eq!(INODE_TABLE_PAGE, 1);
        assert_eq!(JOURNAL_PAGE, 5);
        assert_eq!(TRUNC_PAGE, 7);
        assert_eq!(DATA_PAGE, 8);
        assert_eq!(INODE_LOG_CAP, 9);
        assert_eq!(JOURNAL_ENTRY_CAP, 168);
        assert_eq!(DENTRIES_PER_PAGE, 128);
    }

    #[test]
    fn inode_offsets_do_not_cross_inodes() {
        let base = inode_off(3);
        assert_eq!(base % INODE_SIZE, 0);
        assert_eq!(inode_log_entry_off(3, INODE_LOG_CAP - 1) + 8, inode_off(4));
        assert_eq!(inode_direct_word_off(3, 7), base + INODE_DIRECT_OFF + 24);
    }

    #[test]
    fn dentry_ctrl_word_is_aligned() {
        for slot in [0usize, 1, 127] {
            assert_eq!(dentry_ctrl_off(DATA_PAGE, slot) % 8, 0);
        }
        let (ino, used) = unpack_dentry_ctrl(pack_dentry_ctrl(42, true));
        assert_eq!((ino, used), (42, true));
        let (_, free) = unpack_dentry_ctrl(pack_dentry_ctrl(42, false));
        assert!(!free);
    }

    #[test]
    fn direct_word_packing() {
        let w = direct_into_word(0, 0, 7);
        let w = direct_into_word(w, 1, 9);
        assert_eq!(direct_from_word(w, 0), 7);
        assert_eq!(direct_from_word(w, 1), 9);
        let w = direct_into_word(w, 0, 0);
        assert_eq!(direct_from_word(w, 0), 0);
        assert_eq!(direct_from_word(w, 1), 9);
    }

    #[test]
    fn checksum_ignores_its_own_field() {
        let mut a = vec![0xabu8; INODE_SIZE];
        let mut b = a.clone();
        a[4..8].copy_from_slice(&[1, 2, 3, 4]);
        b[4..8].copy_from_slice(&[9, 9, 9, 9]);
        assert_eq!(inode_checksum(&a), inode_checksum(&b));
        b[8] ^= 1;
        assert_ne!(inode_checksum(&a), inode_checksum(&b));
    }
}
