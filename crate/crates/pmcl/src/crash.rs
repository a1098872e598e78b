//! Crash-state enumeration.
//!
//! A crash can happen at any instruction, but distinct persistent outcomes
//! only arise at two families of moments: immediately before each store
//! fence (where every subset of the in-flight writes may or may not have
//! made it) and at each syscall boundary (the post-return durable state).
//! This module walks a device trace, yields those crash points, coalesces
//! the in-flight writes at each one into replay units, and enumerates the
//! admissible subsets.
//!
//! Admissibility encodes x86 semantics: writes to the *same* cache line
//! leave the cache in order, so a later same-line write never persists
//! without the earlier ones. Units on different lines are independent.
//!
//! States are constructed in place on a device via [`materialize`] under an
//! undo scope, then rolled back, so checking thousands of states per point
//! never copies the full image.

use crate::hash::Fnv64;
use crate::pmem::{InFlightEntry, PmDevice, PmemError, RecordKind, Trace};
use std::collections::HashSet;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CrashEnumError {
    #[error("trace markers: {0}")]
    Markers(String),
    #[error("crash point seq {0} not found in trace")]
    UnknownPoint(u64),
    #[error(transparent)]
    Pmem(#[from] PmemError),
}

/// One moment a crash is simulated at. `mid_call` points sit immediately
/// before a fence inside a marked syscall and carry the in-flight set that
/// fence would have retired; boundary points sit at a syscall return and
/// represent the post-call flushed state.
#[derive(Debug, Clone)]
pub struct CrashPoint {
    /// Ordinal among the trace's crash points.
    pub index: usize,
    /// Sequence number of the fence record (mid-call) or end marker.
    pub seq: u64,
    /// Index of the syscall this point belongs to.
    pub syscall: u64,
    pub mid_call: bool,
    pub in_flight: Vec<InFlightEntry>,
}

/// A coalesced in-flight write: either one flushed line or a run of
/// adjacent NT-store chunks from the same logical write. Subsets are chosen
/// at unit granularity, so a large data write persists all-or-nothing
/// rather than spawning a state per 8-byte chunk.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayUnit {
    pub offset: usize,
    pub payload: Vec<u8>,
    pub kind: RecordKind,
    pub syscall: Option<u64>,
    pub seq_first: u64,
    pub seq_last: u64,
    /// How many raw in-flight entries were merged into this unit.
    pub merged: usize,
}

impl ReplayUnit {
    pub fn end(&self) -> usize {
        self.offset + self.payload.len()
    }

    fn line_span(&self, line_size: usize) -> (usize, usize) {
        (self.offset / line_size, (self.end() - 1) / line_size)
    }
}

/// Walks the trace and returns every crash point in order. Fences outside
/// marked syscalls (mkfs, mount, setup) produce no points. The walk mirrors
/// the device's in-flight rule exactly, including skipping clean-line
/// flushes, which is why it also tracks line dirtiness.
pub fn enumerate_crash_points(trace: &Trace) -> Result<Vec<CrashPoint>, CrashEnumError> {
    trace.validate_markers().map_err(CrashEnumError::Markers)?;
    let line_size = trace.line_size as usize;
    let mut points = Vec::new();
    let mut in_flight: Vec<InFlightEntry> = Vec::new();
    let mut dirty: HashSet<usize> = HashSet::new();
    let mut cur_syscall: Option<u64> = None;
    for r in &trace.records {
        match r.kind {
            RecordKind::Store => {
                let first = r.offset as usize / line_size;
                let last = (r.offset as usize + r.payload.len().max(1) - 1) / line_size;
                for l in first..=last {
                    dirty.insert(l);
                }
            }
            RecordKind::NtStore => in_flight.push(InFlightEntry {
                offset: r.offset as usize,
                payload: r.payload.clone(),
                kind: r.kind,
                syscall: r.syscall,
                seq: r.seq,
            }),
            RecordKind::Flush => {
                if dirty.remove(&(r.offset as usize / line_size)) {
                    in_flight.push(InFlightEntry {
                        offset: r.offset as usize,
                        payload: r.payload.clone(),
                        kind: r.kind,
                        syscall: r.syscall,
                        seq: r.seq,
                    });
                }
            }
            RecordKind::Fence => {
                if let Some(sc) = cur_syscall {
                    points.push(CrashPoint {
                        index: points.len(),
                        seq: r.seq,
                        syscall: sc,
                        mid_call: true,
                        in_flight: in_flight.clone(),
                    });
                }
                in_flight.clear();
            }
            RecordKind::SyscallBegin => cur_syscall = Some(r.offset),
            RecordKind::SyscallEnd => {
                // Whatever is still in flight here was not fenced by the
                // returning call; it is carried, not retired.
                points.push(CrashPoint {
                    index: points.len(),
                    seq: r.seq,
                    syscall: r.offset,
                    mid_call: false,
                    in_flight: in_flight.clone(),
                });
                cur_syscall = None;
            }
            RecordKind::MountMark => {}
        }
    }
    Ok(points)
}

/// Merges runs of adjacent NT-store chunks (same syscall, consecutive
/// sequence numbers, touching offsets) into single replay units. Flushed
/// lines stay line-granular: they are metadata-sized already and never
/// belong to a bulk data write.
pub fn coalesce(entries: &[InFlightEntry]) -> Vec<ReplayUnit> {
    let mut units: Vec<ReplayUnit> = Vec::new();
    for e in entries {
        if e.kind == RecordKind::NtStore {
            if let Some(last) = units.last_mut() {
                if last.kind == RecordKind::NtStore
                    && last.syscall == e.syscall
                    && last.seq_last + 1 == e.seq
                    && last.end() == e.offset
                {
                    last.payload.extend_from_slice(&e.payload);
                    last.seq_last = e.seq;
                    last.merged += 1;
                    continue;
                }
            }
        }
        units.push(ReplayUnit {
            offset: e.offset,
            payload: e.payload.clone(),
            kind: e.kind,
            syscall: e.syscall,
            seq_first: e.seq,
            seq_last: e.seq,
            merged: 1,
        });
    }
    units
}

/// A subset of replay units, as ascending indices into the unit slice.
pub type Subset = Vec<usize>;

/// Iterator over the admissible subsets at one crash point.
///
/// Emission order is by subset size, so a budgeted consumer sees small
/// states first; ties break lexicographically on the per-group counts.
/// The empty subset comes first and is only emitted mid-call, where it is
/// the "nothing persisted" baseline. At a boundary point the single state
/// is the flushed image itself, i.e. also the empty subset, and nothing
/// else: whatever a returned syscall left unfenced is *not* guaranteed.
pub struct SubsetIter {
    /// Same-line groups; each inner vec holds unit indices in trace order.
    groups: Vec<Vec<usize>>,
    /// Current per-group take counts; empty means exhausted.
    counts: Vec<usize>,
    size: usize,
    max_size: usize,
    emitted_empty: bool,
    boundary_only: bool,
}

/// Groups units whose line spans intersect. Units within a group are kept
/// in trace order and may only persist as prefixes of that order.
fn same_line_groups(units: &[ReplayUnit], line_size: usize) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut spans: Vec<(usize, usize)> = Vec::new(); // line span per group
    for (i, u) in units.iter().enumerate() {
        let (lo, hi) = u.line_span(line_size);
        let mut home: Option<usize> = None;
        for (g, span) in spans.iter_mut().enumerate() {
            if lo <= span.1 && hi >= span.0 {
                home = Some(g);
                span.0 = span.0.min(lo);
                span.1 = span.1.max(hi);
                break;
            }
        }
        match home {
            Some(g) => groups[g].push(i),
            None => {
                groups.push(vec![i]);
                spans.push((lo, hi));
            }
        }
    }
    // A unit could bridge two previously disjoint groups; merge until stable.
    loop {
        let mut merged_any = false;
        'outer: for a in 0..spans.len() {
            for b in a + 1..spans.len() {
                if spans[a].0 <= spans[b].1 && spans[b].0 <= spans[a].1 {
                    let (gb, sb) = (groups.remove(b), spans.remove(b));
                    groups[a].extend(gb);
                    groups[a].sort_unstable();
                    spans[a].0 = spans[a].0.min(sb.0);
                    spans[a].1 = spans[a].1.max(sb.1);
                    merged_any = true;
                    break 'outer;
                }
            }
        }
        if !merged_any {
            return groups;
        }
    }
}

impl SubsetIter {
    pub fn new(units: &[ReplayUnit], line_size: usize, cap: Option<usize>, mid_call: bool) -> SubsetIter {
        let groups = same_line_groups(units, line_size);
        let total: usize = groups.iter().map(Vec::len).sum();
        SubsetIter {
            counts: vec![0; groups.len()],
            groups,
            size: 0,
            max_size: cap.map_or(total, |c| c.min(total)),
            emitted_empty: false,
            boundary_only: !mid_call,
        }
    }

    /// First composition of `size` across the groups in lexicographic order,
    /// or None if size exceeds what the groups can hold.
    fn first_composition(&mut self, size: usize) -> bool {
        let mut remaining = size;
        let caps: Vec<usize> = self.groups.iter().map(Vec::len).collect();
        let suffix_cap: Vec<usize> = {
            let mut acc = vec![0; caps.len() + 1];
            for i in (0..caps.len()).rev() {
                acc[i] = acc[i + 1] + caps[i];
            }
            acc
        };
        for i in 0..caps.len() {
            // smallest count such that the suffix can still absorb the rest
            let need = remaining.saturating_sub(suffix_cap[i + 1]);
            if need > caps[i] {
                return false;
            }
            self.counts[i] = need;
            remaining -= need;
        }
        remaining == 0 || caps.is_empty() && size == 0
    }

    /// Advances counts to the next composition of the same total, odometer
    /// style; false when this size is exhausted.
    fn next_composition(&mut self) -> bool {
        let caps: Vec<usize> = self.groups.iter().map(Vec::len).collect();
        let n = caps.len();
        if n == 0 {
            return false;
        }
        let suffix_cap: Vec<usize> = {
            let mut acc = vec![0; n + 1];
            for i in (0..n).rev() {
                acc[i] = acc[i + 1] + caps[i];
            }
            acc
        };
        // Find the rightmost position we can increment while pushing the
        // excess into the suffix.
        let mut trailing: usize = 0; // sum of counts right of position i
        for i in (0..n).rev() {
            trailing += self.counts[i];
            let candidate = self.counts[i] + 1;
            let rest = trailing - self.counts[i];
            // after incrementing position i, the suffix must hold rest - 1
            if candidate <= caps[i] && rest >= 1 {
                self.counts[i] = candidate;
                let mut remaining = rest - 1;
                for j in i + 1..n {
                    let need = remaining.saturating_sub(suffix_cap[j + 1]);
                    debug_assert!(need <= caps[j]);
                    self.counts[j] = need;
                    remaining -= need;
                }
                return true;
            }
        }
        false
    }

    fn emit(&self) -> Subset {
        let mut s: Subset = Vec::new();
        for (g, &c) in self.groups.iter().zip(&self.counts) {
            s.extend_from_slice(&g[..c]);
        }
        s.sort_unstable();
        s
    }
}

impl Iterator for SubsetIter {
    type Item = Subset;

    fn next(&mut self) -> Option<Subset> {
        if !self.emitted_empty {
            self.emitted_empty = true;
            return Some(Vec::new());
        }
        if self.boundary_only {
            return None;
        }
        loop {
            if self.size == 0 {
                self.size = 1;
                if self.size > self.max_size {
                    return None;
                }
                if self.first_composition(self.size) {
                    return Some(self.emit());
                }
                continue;
            }
            if self.next_composition() {
                return Some(self.emit());
            }
            self.size += 1;
            if self.size > self.max_size {
                return None;
            }
            if self.first_composition(self.size) {
                return Some(self.emit());
            }
        }
    }
}

/// Applies the chosen units to both device images in trace order, as the
/// durable state a crashed machine would boot with. Callers wrap this and
/// the subsequent mount in a device undo scope and roll back afterwards.
pub fn materialize(dev: &mut PmDevice, units: &[ReplayUnit], subset: &[usize]) -> Result<(), CrashEnumError> {
    for &i in subset {
        let u = &units[i];
        dev.apply_crash_write(u.offset, &u.payload)?;
    }
    Ok(())
}

/// Digest of the bytes a crash state can differ in: the union of the unit
/// ranges, read from the persistent image after materialization. States at
/// the same point share everything outside those ranges, so this is enough
/// to suppress bit-identical duplicates cheaply.
pub fn state_digest(dev: &PmDevice, units: &[ReplayUnit]) -> u64 {
    let mut h = Fnv64::new();
    for u in units {
        h.update_u64(u.offset as u64);
        h.update(&dev.persistent()[u.offset..u.end()]);
    }
    h.finish()
}

/// Replays the trace to reconstruct the persistent image as of each crash
/// point, in order. Advancing to point seq `s` applies every record before
/// `s`; the point's own in-flight set stays unapplied.
pub struct ImageCursor<'t> {
    trace: &'t Trace,
    pos: usize,
    pending: Vec<(usize, usize)>, // record index, offset
    image: Vec<u8>,
}

impl<'t> ImageCursor<'t> {
    pub fn new(trace: &'t Trace) -> ImageCursor<'t> {
        ImageCursor {
            trace,
            pos: 0,
            pending: Vec::new(),
            image: vec![0; trace.capacity as usize],
        }
    }

    /// Advances to just before the record with sequence number `seq`.
    /// Targets must be non-decreasing across calls.
    pub fn advance_to(&mut self, seq: u64) -> Result<&[u8], CrashEnumError> {
        while self.pos < self.trace.records.len() {
            let r = &self.trace.records[self.pos];
            if r.seq >= seq {
                return Ok(&self.image);
            }
            match r.kind {
                RecordKind::Flush | RecordKind::NtStore => {
                    self.pending.push((self.pos, r.offset as usize));
                }
                RecordKind::Fence => {
                    for (idx, off) in self.pending.drain(..) {
                        let payload = &self.trace.records[idx].payload;
                        self.image[off..off + payload.len()].copy_from_slice(payload);
                    }
                }
                _ => {}
            }
            self.pos += 1;
        }
        if self.trace.records.last().map_or(true, |r| r.seq < seq) && self.pos == self.trace.records.len() {
            // Advancing past the end is only valid if seq is exactly one
            // past the last record; otherwise the point is bogus.
            return Ok(&self.image);
        }
        Err(CrashEnumError::UnknownPoint(seq))
    }

    pub fn image(&self) -> &[u8] {
        &self.image
    }
}
