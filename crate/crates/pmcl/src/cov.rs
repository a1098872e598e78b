//! Branch coverage for feedback-driven fuzzing. Edges are static string
//! labels placed by hand at interesting control-flow points in the subject
//! file system; a run's coverage is the set of labels it hit, split into the
//! pre-crash partition (recording phase) and the recovery partition (mount
//! and check of crash states).

use std::collections::BTreeSet;

use crate::hash::Fnv64;

/// A set of hit edge labels. Labels are `&'static str` so hitting an edge is
/// a set insert with no allocation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CovSet {
    edges: BTreeSet<&'static str>,
}

impl CovSet {
    pub fn new() -> Self {
        CovSet::default()
    }

    pub fn hit(&mut self, edge: &'static str) {
        self.edges.insert(edge);
    }

    pub fn contains(&self, edge: &str) -> bool {
        self.edges.contains(edge)
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.edges.iter().copied()
    }

    pub fn merge(&mut self, other: &CovSet) {
        self.edges.extend(other.edges.iter());
    }

    /// Count of edges in `other` not yet in `self`.
    pub fn new_edges(&self, other: &CovSet) -> usize {
        other.edges.difference(&self.edges).count()
    }

    /// Order-independent digest of the edge set.
    pub fn signature(&self) -> u64 {
        let mut h = Fnv64::new();
        for e in &self.edges {
            h.update(e.as_bytes());
            h.update(&[0]);
        }
        h.finish()
    }
}

/// Coverage split by phase. A fuzz candidate is promoted to the seed pool if
/// it adds edges to either partition.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CoverageMap {
    pub pre_crash: CovSet,
    pub recovery: CovSet,
}

impl CoverageMap {
    pub fn new() -> Self {
        CoverageMap::default()
    }

    pub fn merge(&mut self, other: &CoverageMap) {
        self.pre_crash.merge(&other.pre_crash);
        self.recovery.merge(&other.recovery);
    }

    pub fn would_add(&self, other: &CoverageMap) -> bool {
        self.pre_crash.new_edges(&other.pre_crash) > 0
            || self.recovery.new_edges(&other.recovery) > 0
    }

    pub fn total(&self) -> usize {
        self.pre_crash.len() + self.recovery.len()
    }
}
