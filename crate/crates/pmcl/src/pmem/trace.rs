//! Write-event records and the binary trace format.
//!
//! A trace is the complete, ordered event history of one device: plain
//! stores, non-temporal stores, line flushes, fences and the syscall/mount
//! markers the harness inserts. Replaying the durability-relevant records
//! (`Flush`/`NtStore` buffered until the next `Fence`) onto a zeroed image
//! reproduces the device's persistent image bit for bit; this doubles as an
//! audit that nothing mutated persistent bytes behind the model's back.

use serde::Serialize;
use thiserror::Error;

/// Event kinds. The discriminants are the on-disk kind bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum RecordKind {
    /// Plain store: volatile until the covering line is flushed.
    Store = 1,
    /// Non-temporal store: bypasses the cache, in flight until the next fence.
    NtStore = 2,
    /// Cache-line flush; payload is the whole line at flush time.
    Flush = 3,
    /// Store fence: makes every in-flight write durable.
    Fence = 4,
    SyscallBegin = 5,
    SyscallEnd = 6,
    MountMark = 7,
}

impl RecordKind {
    fn from_byte(b: u8) -> Option<RecordKind> {
        Some(match b {
            1 => RecordKind::Store,
            2 => RecordKind::NtStore,
            3 => RecordKind::Flush,
            4 => RecordKind::Fence,
            5 => RecordKind::SyscallBegin,
            6 => RecordKind::SyscallEnd,
            7 => RecordKind::MountMark,
            _ => return None,
        })
    }
}

/// `syscall` is the index of the enclosing marked syscall, if any.
/// Marker records carry the syscall index in `offset`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub kind: RecordKind,
    pub offset: u64,
    pub seq: u64,
    pub syscall: Option<u64>,
    pub payload: Vec<u8>,
}

impl Record {
    pub fn len(&self) -> u64 {
        self.payload.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.payload.is_empty()
    }
}

pub const TRACE_MAGIC: &[u8; 4] = b"PMCL";
pub const TRACE_VERSION: u32 = 1;

/// Sentinel for "not inside a syscall" in the serialized form.
const NO_SYSCALL: u64 = u64::MAX;

#[derive(Debug, Error)]
pub enum TraceCodecError {
    #[error("bad magic, not a pmcl trace")]
    BadMagic,
    #[error("unsupported trace version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown record kind byte {0}")]
    BadKind(u8),
    #[error("truncated trace: needed {needed} more bytes at offset {at}")]
    Truncated { at: usize, needed: usize },
    #[error("record at offset {at} exceeds device capacity")]
    OutOfRange { at: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trace {
    pub capacity: u32,
    pub line_size: u32,
    pub records: Vec<Record>,
}

impl Trace {
    /// Serializes to the 16-byte header followed by length-prefixed records.
    /// Record layout: kind byte, then offset/length/seq/syscall as 8-byte LE,
    /// then `length` payload bytes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.records.len() * 33);
        out.extend_from_slice(TRACE_MAGIC);
        out.extend_from_slice(&TRACE_VERSION.to_le_bytes());
        out.extend_from_slice(&self.capacity.to_le_bytes());
        out.extend_from_slice(&self.line_size.to_le_bytes());
        for r in &self.records {
            out.push(r.kind as u8);
            out.extend_from_slice(&r.offset.to_le_bytes());
            out.extend_from_slice(&r.len().to_le_bytes());
            out.extend_from_slice(&r.seq.to_le_bytes());
            out.extend_from_slice(&r.syscall.unwrap_or(NO_SYSCALL).to_le_bytes());
            out.extend_from_slice(&r.payload);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Trace, TraceCodecError> {
        if bytes.len() < 16 {
            return Err(TraceCodecError::Truncated { at: 0, needed: 16 - bytes.len() });
        }
        if &bytes[0..4] != TRACE_MAGIC {
            return Err(TraceCodecError::BadMagic);
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != TRACE_VERSION {
            return Err(TraceCodecError::UnsupportedVersion(version));
        }
        let capacity = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        let line_size = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
        let mut records = Vec::new();
        let mut at = 16;
        while at < bytes.len() {
            if bytes.len() - at < 33 {
                return Err(TraceCodecError::Truncated { at, needed: 33 - (bytes.len() - at) });
            }
            let kind = RecordKind::from_byte(bytes[at]).ok_or(TraceCodecError::BadKind(bytes[at]))?;
            let offset = u64::from_le_bytes(bytes[at + 1..at + 9].try_into().unwrap());
            let length = u64::from_le_bytes(bytes[at + 9..at + 17].try_into().unwrap());
            let seq = u64::from_le_bytes(bytes[at + 17..at + 25].try_into().unwrap());
            let syscall = u64::from_le_bytes(bytes[at + 25..at + 33].try_into().unwrap());
            at += 33;
            let length = usize::try_from(length).map_err(|_| TraceCodecError::OutOfRange { at })?;
            if bytes.len() - at < length {
                return Err(TraceCodecError::Truncated { at, needed: length - (bytes.len() - at) });
            }
            if matches!(kind, RecordKind::Store | RecordKind::NtStore | RecordKind::Flush)
                && offset as usize + length > capacity as usize
            {
                return Err(TraceCodecError::OutOfRange { at });
            }
            let payload = bytes[at..at + length].to_vec();
            at += length;
            records.push(Record {
                kind,
                offset,
                seq,
                syscall: if syscall == NO_SYSCALL { None } else { Some(syscall) },
                payload,
            });
        }
        Ok(Trace { capacity, line_size, records })
    }

    /// Replays durability semantics onto a zeroed image: flushes and NT
    /// stores accumulate, each fence applies the accumulated set in order.
    /// Unfenced trailing writes never reach the image, same as on the device.
    pub fn replay_persistent(&self) -> Vec<u8> {
        let mut image = vec![0u8; self.capacity as usize];
        self.replay_persistent_onto(&mut image);
        image
    }

    pub fn replay_persistent_onto(&self, image: &mut [u8]) {
        let mut pending: Vec<(usize, &[u8])> = Vec::new();
        for r in &self.records {
            match r.kind {
                RecordKind::Flush | RecordKind::NtStore => {
                    pending.push((r.offset as usize, &r.payload));
                }
                RecordKind::Fence => {
                    for (off, bytes) in pending.drain(..) {
                        image[off..off + bytes.len()].copy_from_slice(bytes);
                    }
                }
                _ => {}
            }
        }
    }

    /// Sequence numbers of flushes that hit a line with no unflushed plain
    /// stores. Useful for spotting redundant flush patterns in a subject.
    pub fn clean_flush_seqs(&self) -> Vec<u64> {
        let line = self.line_size as u64;
        let mut dirty: std::collections::HashSet<u64> = std::collections::HashSet::new();
        let mut clean = Vec::new();
        for r in &self.records {
            match r.kind {
                RecordKind::Store => {
                    let first = r.offset / line;
                    let last = (r.offset + r.len().max(1) - 1) / line;
                    for l in first..=last {
                        dirty.insert(l);
                    }
                }
                RecordKind::Flush => {
                    if !dirty.remove(&(r.offset / line)) {
                        clean.push(r.seq);
                    }
                }
                _ => {}
            }
        }
        clean
    }

    /// Checks begin/end marker nesting and returns the number of marked
    /// syscalls. Markers must appear as non-overlapping `begin i ... end i`
    /// pairs with consecutive indices starting at zero.
    pub fn validate_markers(&self) -> Result<u64, String> {
        let mut open: Option<u64> = None;
        let mut next = 0u64;
        for r in &self.records {
            match r.kind {
                RecordKind::SyscallBegin => {
                    if let Some(i) = open {
                        return Err(format!("syscall {} begins inside syscall {}", r.offset, i));
                    }
                    if r.offset != next {
                        return Err(format!("expected syscall {next}, marker says {}", r.offset));
                    }
                    open = Some(r.offset);
                }
                RecordKind::SyscallEnd => match open.take() {
                    Some(i) if i == r.offset => next = i + 1,
                    Some(i) => return Err(format!("syscall {} ends while {} is open", r.offset, i)),
                    None => return Err(format!("syscall {} ends without begin", r.offset)),
                },
                _ => {}
            }
        }
        if let Some(i) = open {
            return Err(format!("syscall {i} never ends"));
        }
        Ok(next)
    }
}
