// SPDX-License-Identifier: Apache-2.0

//! Private-memory slab allocator with redzones, poisoning and a free quarantine.
//!
//! Layout of one allocation (`start` is 16-byte aligned):
//!
//! ```text
//! start        base                 base+size      end
//!   | redzone 16 | data (size bytes) | redzone >=16 |
//! ```
//!
//! The right redzone runs to the next 16-byte boundary plus 16 bytes, so
//! consecutive allocations tile the address space without gaps. Addresses are
//! handed out by a bump pointer and never reused within an iteration; a freed
//! allocation stays poisoned in the quarantine until 256 later frees evict it,
//! after which its range reads as unmapped.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use super::addr::{GuestAddress, PRIVATE_BASE};

pub const REDZONE: u64 = 16;
pub const POISON_FREED: u8 = 0xFD;
pub const POISON_REDZONE: u8 = 0xFA;
pub const QUARANTINE_DEPTH: usize = 256;
pub const DEFAULT_ALLOC_CAP: u64 = 64 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocState {
    Live,
    /// Poisoned and held in the quarantine.
    Freed,
}

#[derive(Debug, Clone)]
pub struct SlabAllocation {
    pub base: GuestAddress,
    pub size: u64,
    pub state: AllocState,
    /// Site of the allocating call.
    pub site: u32,
    start: u64,
    end: u64,
    /// Whole footprint including redzones.
    bytes: Vec<u8>,
}

impl SlabAllocation {
    pub fn start(&self) -> u64 {
        self.start
    }

    pub fn end(&self) -> u64 {
        self.end
    }

    fn data_range(&self) -> (u64, u64) {
        (self.base.0, self.base.0 + self.size)
    }

    /// Raw footprint bytes (redzones included), for poisoning checks.
    pub fn footprint(&self) -> &[u8] {
        &self.bytes
    }
}

/// What a single private byte belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Zone {
    Data,
    Redzone,
    Freed,
    Unmapped,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum AllocError {
    #[error("zero-sized allocation")]
    ZeroSize,
    #[error("allocation of {requested} bytes would exceed the {cap}-byte cap ({live} live)")]
    CapExceeded { requested: u64, live: u64, cap: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FreeError {
    #[error("double free of {0}")]
    DoubleFree(GuestAddress),
    #[error("free of {0}, which is not an allocation base")]
    InvalidFree(GuestAddress),
}

#[derive(Debug, Clone)]
pub struct SlabAllocator {
    allocations: BTreeMap<u64, SlabAllocation>,
    quarantine: VecDeque<u64>,
    next: u64,
    live_bytes: u64,
    cap: u64,
}

impl Default for SlabAllocator {
    fn default() -> Self {
        Self::new(DEFAULT_ALLOC_CAP)
    }
}

fn align_up(v: u64, a: u64) -> u64 {
    v.div_ceil(a) * a
}

impl SlabAllocator {
    pub fn new(cap: u64) -> Self {
        Self {
            allocations: BTreeMap::new(),
            quarantine: VecDeque::new(),
            next: PRIVATE_BASE,
            live_bytes: 0,
            cap,
        }
    }

    pub fn cap(&self) -> u64 {
        self.cap
    }

    pub fn live_bytes(&self) -> u64 {
        self.live_bytes
    }

    pub fn live_count(&self) -> usize {
        self.allocations
            .values()
            .filter(|a| a.state == AllocState::Live)
            .count()
    }

    pub fn galloc(&mut self, size: u64, site: u32) -> Result<GuestAddress, AllocError> {
        if size == 0 {
            return Err(AllocError::ZeroSize);
        }
        if self.live_bytes.saturating_add(size) > self.cap {
            return Err(AllocError::CapExceeded {
                requested: size,
                live: self.live_bytes,
                cap: self.cap,
            });
        }
        let start = self.next;
        let base = start + REDZONE;
        let end = align_up(base + size, 16) + REDZONE;
        let mut bytes = vec![0u8; (end - start) as usize];
        bytes[..REDZONE as usize].fill(POISON_REDZONE);
        bytes[(base + size - start) as usize..].fill(POISON_REDZONE);
        self.allocations.insert(
            start,
            SlabAllocation {
                base: GuestAddress(base),
                size,
                state: AllocState::Live,
                site,
                start,
                end,
                bytes,
            },
        );
        self.next = end;
        self.live_bytes += size;
        Ok(GuestAddress(base))
    }

    pub fn gfree(&mut self, ptr: GuestAddress) -> Result<(), FreeError> {
        let Some(alloc) = ptr
            .0
            .checked_sub(REDZONE)
            .and_then(|start| self.allocations.get_mut(&start))
        else {
            return Err(FreeError::InvalidFree(ptr));
        };
        if alloc.state == AllocState::Freed {
            return Err(FreeError::DoubleFree(ptr));
        }
        alloc.state = AllocState::Freed;
        let (lo, hi) = ((alloc.base.0 - alloc.start) as usize, (alloc.base.0 + alloc.size - alloc.start) as usize);
        alloc.bytes[lo..hi].fill(POISON_FREED);
        self.live_bytes -= alloc.size;
        self.quarantine.push_back(alloc.start);
        if self.quarantine.len() > QUARANTINE_DEPTH
            && let Some(evicted) = self.quarantine.pop_front()
        {
            self.allocations.remove(&evicted);
        }
        Ok(())
    }

    /// The allocation (live or quarantined) whose footprint contains `addr`.
    pub fn containing(&self, addr: u64) -> Option<&SlabAllocation> {
        self.allocations
            .range(..=addr)
            .next_back()
            .map(|(_, a)| a)
            .filter(|a| addr < a.end)
    }

    pub fn find_base(&self, base: GuestAddress) -> Option<&SlabAllocation> {
        base.0
            .checked_sub(REDZONE)
            .and_then(|s| self.allocations.get(&s))
            .filter(|a| a.base == base)
    }

    /// Zone of `addr` and the exclusive end of the run of bytes sharing it.
    pub fn zone(&self, addr: u64) -> (Zone, u64) {
        match self.containing(addr) {
            Some(a) if a.state == AllocState::Freed => (Zone::Freed, a.end),
            Some(a) => {
                let (lo, hi) = a.data_range();
                if addr < lo {
                    (Zone::Redzone, lo)
                } else if addr < hi {
                    (Zone::Data, hi)
                } else {
                    (Zone::Redzone, a.end)
                }
            }
            None => {
                let next = self
                    .allocations
                    .range(addr..)
                    .next()
                    .map(|(s, _)| *s)
                    .unwrap_or(u64::MAX);
                (Zone::Unmapped, next)
            }
        }
    }

    /// First byte of `[addr, addr+len)` that is not live data, with its zone.
    pub fn first_fault(&self, addr: u64, len: u64) -> Option<(u64, Zone)> {
        let end = addr.saturating_add(len);
        let mut a = addr;
        while a < end {
            let (zone, run_end) = self.zone(a);
            if zone != Zone::Data {
                return Some((a, zone));
            }
            a = run_end;
        }
        None
    }

    /// Copies out live data; the caller has already validated the range.
    pub fn read(&self, addr: u64, len: usize) -> Vec<u8> {
        let a = self.containing(addr).expect("validated read");
        let off = (addr - a.start) as usize;
        a.bytes[off..off + len].to_vec()
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) {
        let start = self
            .allocations
            .range(..=addr)
            .next_back()
            .map(|(s, _)| *s)
            .expect("validated write");
        let a = self.allocations.get_mut(&start).expect("validated write");
        let off = (addr - a.start) as usize;
        a.bytes[off..off + data.len()].copy_from_slice(data);
    }

    pub fn allocations(&self) -> impl Iterator<Item = &SlabAllocation> {
        self.allocations.values()
    }

    pub fn quarantine_len(&self) -> usize {
        self.quarantine.len()
    }

    /// Drops every allocation (end-of-iteration sweep).
    pub fn sweep(&mut self) {
        self.allocations.clear();
        self.quarantine.clear();
        self.live_bytes = 0;
        self.next = PRIVATE_BASE;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_and_poison() {
        let mut s = SlabAllocator::default();
        let p = s.galloc(64, 1).unwrap();
        assert_eq!(p.0, PRIVATE_BASE + REDZONE);
        let a = s.find_base(p).unwrap();
        assert!(a.footprint()[..16].iter().all(|b| *b == POISON_REDZONE));
        assert!(a.footprint()[16..80].iter().all(|b| *b == 0));
        assert!(a.footprint()[80..].iter().all(|b| *b == POISON_REDZONE));
        s.gfree(p).unwrap();
        let a = s.find_base(p).unwrap();
        assert!(a.footprint()[16..80].iter().all(|b| *b == POISON_FREED));
    }

    #[test]
    fn in_bounds_and_one_past_end() {
        let mut s = SlabAllocator::default();
        let p = s.galloc(64, 1).unwrap();
        assert_eq!(s.first_fault(p.0, 64), None);
        assert_eq!(s.first_fault(p.0 + 64, 1), Some((p.0 + 64, Zone::Redzone)));
        assert_eq!(s.first_fault(p.0 - 1, 1), Some((p.0 - 1, Zone::Redzone)));
        assert_eq!(s.first_fault(p.0 + 60, 8), Some((p.0 + 64, Zone::Redzone)));
    }

    #[test]
    fn allocations_do_not_overlap() {
        let mut s = SlabAllocator::default();
        let sizes = [1u64, 7, 8, 15, 16, 17, 100, 4096];
        let ptrs: Vec<_> = sizes.iter().map(|n| s.galloc(*n, 0).unwrap()).collect();
        let allocs: Vec<_> = s.allocations().cloned().collect();
        for w in allocs.windows(2) {
            assert!(w[0].end() <= w[1].start());
        }
        for (p, n) in ptrs.iter().zip(sizes) {
            assert_eq!(s.first_fault(p.0, n), None);
        }
    }

    #[test]
    fn double_and_invalid_free() {
        let mut s = SlabAllocator::default();
        let p = s.galloc(8, 0).unwrap();
        assert_eq!(s.gfree(p), Ok(()));
        assert_eq!(s.gfree(p), Err(FreeError::DoubleFree(p)));
        assert_eq!(s.gfree(p.offset(1)), Err(FreeError::InvalidFree(p.offset(1))));
        assert_eq!(
            s.gfree(GuestAddress(0x1234)),
            Err(FreeError::InvalidFree(GuestAddress(0x1234)))
        );
    }

    #[test]
    fn use_after_free_within_quarantine() {
        let mut s = SlabAllocator::default();
        let p = s.galloc(32, 0).unwrap();
        s.gfree(p).unwrap();
        assert_eq!(s.first_fault(p.0, 1), Some((p.0, Zone::Freed)));
    }

    #[test]
    fn quarantine_evicts_after_depth() {
        let mut s = SlabAllocator::default();
        let first = s.galloc(8, 0).unwrap();
        s.gfree(first).unwrap();
        for _ in 0..QUARANTINE_DEPTH - 1 {
            let p = s.galloc(8, 0).unwrap();
            s.gfree(p).unwrap();
        }
        assert_eq!(s.first_fault(first.0, 1).unwrap().1, Zone::Freed);
        let p = s.galloc(8, 0).unwrap();
        s.gfree(p).unwrap();
        assert_eq!(s.quarantine_len(), QUARANTINE_DEPTH);
        assert_eq!(s.first_fault(first.0, 1).unwrap().1, Zone::Unmapped);
    }

    #[test]
    fn cap_breach() {
        let mut s = SlabAllocator::default();
        let mut n = 0;
        let err = loop {
            match s.galloc(0x1000, 0) {
                Ok(_) => n += 1,
                Err(e) => break e,
            }
        };
        assert_eq!(n, (DEFAULT_ALLOC_CAP / 0x1000) as usize);
        assert!(matches!(err, AllocError::CapExceeded { .. }));
        assert_eq!(s.galloc(0, 0), Err(AllocError::ZeroSize));
    }

    #[test]
    fn freeing_releases_cap() {
        let mut s = SlabAllocator::new(100);
        let p = s.galloc(100, 0).unwrap();
        assert!(s.galloc(1, 0).is_err());
        s.gfree(p).unwrap();
        assert!(s.galloc(100, 0).is_ok());
    }
}
