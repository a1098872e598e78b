//! Software model of a persistent-memory device behind a CPU cache.
//!
//! The model keeps two images. `volatile` is what loads see: every store
//! lands there immediately. `persistent` is what survives a crash: bytes get
//! there only by being put *in flight* (a line flush or a non-temporal store)
//! and then retired by a store fence. Anything in flight at a crash may or
//! may not survive, and the crash enumerator explores exactly those choices.
//!
//! Durability therefore flows through four calls, mirroring the primitives a
//! PM file system actually has: [`PmDevice::nt_memcpy`],
//! [`PmDevice::nt_memset`], [`PmDevice::flush_line`] and
//! [`PmDevice::sfence`]. `clflush`, `clflushopt` and `clwb` are deliberately
//! not distinguished.
//!
//! Plain 8-byte aligned stores are atomic; callers may issue arbitrary-length
//! writes and the device splits them into aligned chunks internally.

pub mod trace;

use thiserror::Error;

pub use trace::{Record, RecordKind, Trace, TraceCodecError};

pub const DEFAULT_CAPACITY: usize = 128 << 20;
pub const MIN_CAPACITY: usize = 1 << 20;
pub const DEFAULT_LINE_SIZE: usize = 64;
/// Store atomicity granularity.
pub const STORE_ALIGN: usize = 8;

#[derive(Debug, Error)]
pub enum PmemError {
    #[error("access out of range: offset {offset} len {len} on {capacity} byte device")]
    OutOfRange { offset: usize, len: usize, capacity: usize },
    #[error("flush offset {offset} not aligned to {line_size} byte line")]
    UnalignedFlush { offset: usize, line_size: usize },
    #[error("bad device geometry: {0}")]
    BadGeometry(String),
    #[error("syscall marker misuse: {0}")]
    MarkerMisuse(String),
    #[error("undo scope already active")]
    UndoActive,
    #[error("no undo scope active")]
    UndoInactive,
    #[error("undo integrity: image changed at offset {offset} after it was logged")]
    UndoMismatch { offset: usize },
}

/// A write that has left the cache but is not yet fenced. Produced by line
/// flushes (whole-line payload) and non-temporal stores (chunk payload).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InFlightEntry {
    pub offset: usize,
    pub payload: Vec<u8>,
    pub kind: RecordKind,
    pub syscall: Option<u64>,
    pub seq: u64,
}

impl InFlightEntry {
    pub fn end(&self) -> usize {
        self.offset + self.payload.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Image {
    Volatile,
    Persistent,
}

#[derive(Debug)]
struct UndoRecord {
    image: Image,
    offset: usize,
    old: Vec<u8>,
    new: Vec<u8>,
}

/// Bookkeeping captured by [`PmDevice::begin_undo`] so a rollback restores
/// the device exactly: byte-level undo records plus the cheap scalar state.
#[derive(Debug)]
struct UndoScope {
    log: Vec<UndoRecord>,
    records_len: usize,
    next_seq: u64,
    in_flight: Vec<InFlightEntry>,
    dirty_lines: std::collections::HashSet<usize>,
    cur_syscall: Option<u64>,
}

#[derive(Debug)]
pub struct PmDevice {
    capacity: usize,
    line_size: usize,
    volatile: Vec<u8>,
    persistent: Vec<u8>,
    dirty_lines: std::collections::HashSet<usize>,
    in_flight: Vec<InFlightEntry>,
    records: Vec<Record>,
    next_seq: u64,
    cur_syscall: Option<u64>,
    undo: Option<UndoScope>,
}

impl PmDevice {
    pub fn new(capacity: usize, line_size: usize) -> Result<PmDevice, PmemError> {
        if !line_size.is_power_of_two() || line_size < STORE_ALIGN {
            return Err(PmemError::BadGeometry(format!("line size {line_size}")));
        }
        if capacity == 0 || capacity % line_size != 0 {
            return Err(PmemError::BadGeometry(format!(
                "capacity {capacity} not a multiple of line size {line_size}"
            )));
        }
        Ok(PmDevice {
            capacity,
            line_size,
            volatile: vec![0; capacity],
            persistent: vec![0; capacity],
            dirty_lines: std::collections::HashSet::new(),
            in_flight: Vec::new(),
            records: Vec::new(),
            next_seq: 0,
            cur_syscall: None,
            undo: None,
        })
    }

    /// A device booted from a crash image: both views equal the image, the
    /// cache is empty. This is the state a file system mounts after a crash.
    pub fn boot_from_image(image: &[u8], line_size: usize) -> Result<PmDevice, PmemError> {
        let mut dev = PmDevice::new(image.len(), line_size)?;
        dev.volatile.copy_from_slice(image);
        dev.persistent.copy_from_slice(image);
        Ok(dev)
    }

    /// Resets an existing device to a freshly booted crash image, reusing its
    /// buffers. The trace is cleared.
    pub fn load_image(&mut self, image: &[u8]) -> Result<(), PmemError> {
        if image.len() != self.capacity {
            return Err(PmemError::BadGeometry(format!(
                "image len {} does not match capacity {}",
                image.len(),
                self.capacity
            )));
        }
        if self.undo.is_some() {
            return Err(PmemError::UndoActive);
        }
        self.volatile.copy_from_slice(image);
        self.persistent.copy_from_slice(image);
        self.dirty_lines.clear();
        self.in_flight.clear();
        self.records.clear();
        self.next_seq = 0;
        self.cur_syscall = None;
        Ok(())
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn line_size(&self) -> usize {
        self.line_size
    }

    pub fn volatile(&self) -> &[u8] {
        &self.volatile
    }

    pub fn persistent(&self) -> &[u8] {
        &self.persistent
    }

    pub fn in_flight(&self) -> &[InFlightEntry] {
        &self.in_flight
    }

    /// Reads from the volatile view, i.e. what a CPU load would return.
    pub fn read(&self, offset: usize, len: usize) -> Result<&[u8], PmemError> {
        self.check_range(offset, len)?;
        Ok(&self.volatile[offset..offset + len])
    }

    pub fn read_u64(&self, offset: usize) -> Result<u64, PmemError> {
        let b = self.read(offset, 8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn check_range(&self, offset: usize, len: usize) -> Result<(), PmemError> {
        if offset.checked_add(len).map_or(true, |end| end > self.capacity) {
            return Err(PmemError::OutOfRange { offset, len, capacity: self.capacity });
        }
        Ok(())
    }

    fn bump_seq(&mut self) -> u64 {
        let s = self.next_seq;
        self.next_seq += 1;
        s
    }

    fn push_record(&mut self, kind: RecordKind, offset: usize, payload: Vec<u8>) {
        let seq = self.bump_seq();
        self.records.push(Record {
            kind,
            offset: offset as u64,
            seq,
            syscall: self.cur_syscall,
            payload,
        });
    }

    fn write_image(&mut self, image: Image, offset: usize, bytes: &[u8]) {
        let buf = match image {
            Image::Volatile => &mut self.volatile,
            Image::Persistent => &mut self.persistent,
        };
        if let Some(scope) = self.undo.as_mut() {
            scope.log.push(UndoRecord {
                image,
                offset,
                old: buf[offset..offset + bytes.len()].to_vec(),
                new: bytes.to_vec(),
            });
        }
        buf[offset..offset + bytes.len()].copy_from_slice(bytes);
    }

    /// Splits `[offset, offset+len)` at `STORE_ALIGN` boundaries.
    fn chunks(offset: usize, len: usize) -> impl Iterator<Item = (usize, usize)> {
        let end = offset + len;
        let mut at = offset;
        std::iter::from_fn(move || {
            if at >= end {
                return None;
            }
            let cell_end = (at / STORE_ALIGN + 1) * STORE_ALIGN;
            let stop = cell_end.min(end);
            let piece = (at, stop - at);
            at = stop;
            Some(piece)
        })
    }

    /// Plain store. Visible to loads immediately, durable only after the
    /// covering lines are flushed and fenced.
    pub fn store(&mut self, offset: usize, data: &[u8]) -> Result<(), PmemError> {
        self.check_range(offset, data.len())?;
        for (at, len) in Self::chunks(offset, data.len()) {
            let bytes = data[at - offset..at - offset + len].to_vec();
            self.write_image(Image::Volatile, at, &bytes);
            self.dirty_lines.insert(at / self.line_size);
            self.push_record(RecordKind::Store, at, bytes);
        }
        Ok(())
    }

    pub fn store_u64(&mut self, offset: usize, value: u64) -> Result<(), PmemError> {
        self.store(offset, &value.to_le_bytes())
    }

    /// Non-temporal copy: bypasses the cache, so the data is in flight right
    /// away and durable at the next fence. Logged as 8-byte chunks.
    pub fn nt_memcpy(&mut self, offset: usize, data: &[u8]) -> Result<(), PmemError> {
        self.check_range(offset, data.len())?;
        for (at, len) in Self::chunks(offset, data.len()) {
            let bytes = data[at - offset..at - offset + len].to_vec();
            self.write_image(Image::Volatile, at, &bytes);
            let seq = self.next_seq;
            self.in_flight.push(InFlightEntry {
                offset: at,
                payload: bytes.clone(),
                kind: RecordKind::NtStore,
                syscall: self.cur_syscall,
                seq,
            });
            self.push_record(RecordKind::NtStore, at, bytes);
        }
        Ok(())
    }

    /// Non-temporal fill, the memset counterpart of [`Self::nt_memcpy`].
    pub fn nt_memset(&mut self, offset: usize, byte: u8, len: usize) -> Result<(), PmemError> {
        // Chunking and record payloads are identical to an nt_memcpy of the
        // expanded buffer; avoid materializing it for large fills.
        self.check_range(offset, len)?;
        for (at, clen) in Self::chunks(offset, len) {
            let bytes = vec![byte; clen];
            self.write_image(Image::Volatile, at, &bytes);
            let seq = self.next_seq;
            self.in_flight.push(InFlightEntry {
                offset: at,
                payload: bytes.clone(),
                kind: RecordKind::NtStore,
                syscall: self.cur_syscall,
                seq,
            });
            self.push_record(RecordKind::NtStore, at, bytes);
        }
        Ok(())
    }

    /// Flushes one cache line. The entry captures the whole line as it is
    /// now; stores to the line after the flush need another flush. Flushing
    /// a line with no unflushed stores is recorded but puts nothing in
    /// flight, so redundant flushes cost nothing at crash time.
    pub fn flush_line(&mut self, offset: usize) -> Result<(), PmemError> {
        if offset % self.line_size != 0 {
            return Err(PmemError::UnalignedFlush { offset, line_size: self.line_size });
        }
        self.check_range(offset, self.line_size)?;
        let line = self.volatile[offset..offset + self.line_size].to_vec();
        let was_dirty = self.dirty_lines.remove(&(offset / self.line_size));
        if was_dirty {
            let seq = self.next_seq;
            self.in_flight.push(InFlightEntry {
                offset,
                payload: line.clone(),
                kind: RecordKind::Flush,
                syscall: self.cur_syscall,
                seq,
            });
        }
        self.push_record(RecordKind::Flush, offset, line);
        Ok(())
    }

    /// Convenience: flush every line overlapping `[offset, offset+len)`.
    pub fn flush_range(&mut self, offset: usize, len: usize) -> Result<(), PmemError> {
        if len == 0 {
            return Ok(());
        }
        self.check_range(offset, len)?;
        let first = offset / self.line_size;
        let last = (offset + len - 1) / self.line_size;
        for l in first..=last {
            self.flush_line(l * self.line_size)?;
        }
        Ok(())
    }

    /// Store fence: retires the in-flight set into the persistent image in
    /// order. After this, everything previously flushed or NT-stored is
    /// crash-safe.
    pub fn sfence(&mut self) {
        let entries = std::mem::take(&mut self.in_flight);
        for e in &entries {
            self.write_image(Image::Persistent, e.offset, &e.payload);
        }
        self.push_record(RecordKind::Fence, 0, Vec::new());
    }

    /// Flush every dirty line (in address order, keeping traces
    /// deterministic) and fence. The moral equivalent of sync(2): after this
    /// nothing is dirty or in flight. The recording harness runs it between
    /// setup and the measured calls so crash points never inherit setup
    /// writes.
    pub fn quiesce(&mut self) -> Result<(), PmemError> {
        let mut lines: Vec<usize> = self.dirty_lines.iter().copied().collect();
        lines.sort_unstable();
        for l in lines {
            self.flush_line(l * self.line_size)?;
        }
        self.sfence();
        Ok(())
    }

    pub fn syscall_begin(&mut self, index: u64) -> Result<(), PmemError> {
        if let Some(open) = self.cur_syscall {
            return Err(PmemError::MarkerMisuse(format!(
                "begin {index} while syscall {open} is open"
            )));
        }
        self.cur_syscall = Some(index);
        self.push_record(RecordKind::SyscallBegin, index as usize, Vec::new());
        Ok(())
    }

    pub fn syscall_end(&mut self, index: u64) -> Result<(), PmemError> {
        match self.cur_syscall {
            Some(open) if open == index => {
                self.push_record(RecordKind::SyscallEnd, index as usize, Vec::new());
                self.cur_syscall = None;
                Ok(())
            }
            Some(open) => Err(PmemError::MarkerMisuse(format!(
                "end {index} while syscall {open} is open"
            ))),
            None => Err(PmemError::MarkerMisuse(format!("end {index} without begin"))),
        }
    }

    pub fn mark_mount(&mut self) {
        self.push_record(RecordKind::MountMark, 0, Vec::new());
    }

    pub fn trace(&self) -> Trace {
        Trace {
            capacity: self.capacity as u32,
            line_size: self.line_size as u32,
            records: self.records.clone(),
        }
    }

    pub fn take_trace(&mut self) -> Trace {
        Trace {
            capacity: self.capacity as u32,
            line_size: self.line_size as u32,
            records: std::mem::take(&mut self.records),
        }
    }

    /// Writes crash-state bytes into both images, as if the bytes had been
    /// durable at the crash and are now visible to the mounting file system.
    /// Participates in the active undo scope like any other mutation.
    pub fn apply_crash_write(&mut self, offset: usize, bytes: &[u8]) -> Result<(), PmemError> {
        self.check_range(offset, bytes.len())?;
        self.write_image(Image::Persistent, offset, bytes);
        self.write_image(Image::Volatile, offset, bytes);
        Ok(())
    }

    /// Starts logging every image mutation so [`Self::rollback_undo`] can
    /// restore the device bit-exactly. One scope at a time.
    pub fn begin_undo(&mut self) -> Result<(), PmemError> {
        if self.undo.is_some() {
            return Err(PmemError::UndoActive);
        }
        self.undo = Some(UndoScope {
            log: Vec::new(),
            records_len: self.records.len(),
            next_seq: self.next_seq,
            in_flight: self.in_flight.clone(),
            dirty_lines: self.dirty_lines.clone(),
            cur_syscall: self.cur_syscall,
        });
        Ok(())
    }

    /// Unwinds the active scope in reverse, verifying that each logged write
    /// is still in place before restoring the old bytes. A mismatch means
    /// something mutated the image outside the logged funnel.
    pub fn rollback_undo(&mut self) -> Result<(), PmemError> {
        let scope = self.undo.take().ok_or(PmemError::UndoInactive)?;
        for rec in scope.log.iter().rev() {
            let buf = match rec.image {
                Image::Volatile => &mut self.volatile,
                Image::Persistent => &mut self.persistent,
            };
            if buf[rec.offset..rec.offset + rec.new.len()] != rec.new[..] {
                // Leave the scope consumed; the device is suspect either way.
                return Err(PmemError::UndoMismatch { offset: rec.offset });
            }
            buf[rec.offset..rec.offset + rec.old.len()].copy_from_slice(&rec.old);
        }
        self.records.truncate(scope.records_len);
        self.next_seq = scope.next_seq;
        self.in_flight = scope.in_flight;
        self.dirty_lines = scope.dirty_lines;
        self.cur_syscall = scope.cur_syscall;
        Ok(())
    }

    /// Ends the active scope keeping all changes.
    pub fn commit_undo(&mut self) -> Result<(), PmemError> {
        self.undo.take().map(|_| ()).ok_or(PmemError::UndoInactive)
    }
}
