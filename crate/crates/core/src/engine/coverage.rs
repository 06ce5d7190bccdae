// SPDX-License-Identifier: Apache-2.0

//! AFL-style hashed edge map over explicit instrumentation sites.

use std::fmt;

use crate::rng::{fnv1a64, mix64};

pub const MAP_SIZE: usize = 1 << 16;

/// Instrumentation point identifier declared by model drivers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Site(pub u32);

impl Site {
    /// Site `n` of the component tagged `owner`. The pair is hashed so that
    /// nearby ids do not collide after the `prev >> 1` edge mixing.
    pub const fn new(owner: u16, n: u16) -> Self {
        let raw = ((owner as u64) << 16) | n as u64;
        Site(mix64(raw) as u32)
    }

    pub const UNKNOWN: Site = Site(0);
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Per-iteration hit counters.
///
/// Only the indices touched since the last [`CoverageMap::reset`] are
/// tracked, so resetting and diffing cost O(edges hit) rather than O(map).
#[derive(Clone)]
pub struct CoverageMap {
    counters: Box<[u8]>,
    touched: Vec<u16>,
    prev: u32,
}

impl Default for CoverageMap {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for CoverageMap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CoverageMap")
            .field("edges", &self.touched.len())
            .field("prev", &self.prev)
            .finish()
    }
}

impl CoverageMap {
    pub fn new() -> Self {
        Self {
            counters: vec![0u8; MAP_SIZE].into_boxed_slice(),
            touched: Vec::new(),
            prev: 0,
        }
    }

    pub fn edge_index(site: Site, prev: u32) -> u16 {
        ((site.0 ^ (prev >> 1)) as usize % MAP_SIZE) as u16
    }

    pub fn hit(&mut self, site: Site) {
        let idx = Self::edge_index(site, self.prev);
        let c = &mut self.counters[idx as usize];
        if *c == 0 {
            self.touched.push(idx);
        }
        *c = c.saturating_add(1);
        self.prev = site.0;
    }

    pub fn count(&self, idx: u16) -> u8 {
        self.counters[idx as usize]
    }

    /// Sorted indices of all edges hit since the last reset.
    pub fn edges(&self) -> Vec<u16> {
        let mut e = self.touched.clone();
        e.sort_unstable();
        e
    }

    pub fn reset(&mut self) {
        for idx in self.touched.drain(..) {
            self.counters[idx as usize] = 0;
        }
        self.prev = 0;
    }
}

/// Cumulative campaign coverage (monotone).
#[derive(Clone)]
pub struct EdgeSet {
    seen: Box<[bool]>,
    count: usize,
}

impl Default for EdgeSet {
    fn default() -> Self {
        Self::new()
    }
}

impl fmt::Debug for EdgeSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "EdgeSet({} edges)", self.count)
    }
}

impl EdgeSet {
    pub fn new() -> Self {
        Self {
            seen: vec![false; MAP_SIZE].into_boxed_slice(),
            count: 0,
        }
    }

    pub fn contains(&self, idx: u16) -> bool {
        self.seen[idx as usize]
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Edges of `edges` not yet in the set.
    pub fn novel(&self, edges: &[u16]) -> Vec<u16> {
        edges.iter().copied().filter(|e| !self.contains(*e)).collect()
    }

    pub fn insert_all(&mut self, edges: &[u16]) {
        for &e in edges {
            if !self.seen[e as usize] {
                self.seen[e as usize] = true;
                self.count += 1;
            }
        }
    }
}

/// 64-bit fingerprint of a sorted edge set; names corpus files.
pub fn fingerprint(edges: &[u16]) -> u64 {
    let bytes: Vec<u8> = edges.iter().flat_map(|e| e.to_le_bytes()).collect();
    fnv1a64(&bytes)
}
