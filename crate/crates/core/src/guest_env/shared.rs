// SPDX-License-Identifier: Apache-2.0

//! Shared (decrypted) guest memory: registered regions over sparse paged storage.

use std::collections::{BTreeMap, HashMap};

const PAGE: u64 = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionKind {
    SwiotlbPool,
    Coherent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SharedRegion {
    pub start: u64,
    pub len: u64,
    pub kind: RegionKind,
}

impl SharedRegion {
    pub fn end(&self) -> u64 {
        self.start + self.len
    }

    pub fn contains_range(&self, addr: u64, len: u64) -> bool {
        addr >= self.start && addr.saturating_add(len) <= self.end()
    }
}

/// Unwritten bytes read as zero.
#[derive(Debug, Clone, Default)]
pub struct SharedMemory {
    regions: BTreeMap<u64, SharedRegion>,
    pages: HashMap<u64, Box<[u8; PAGE as usize]>>,
}

impl SharedMemory {
    pub fn register(&mut self, start: u64, len: u64, kind: RegionKind) {
        debug_assert!(self.region_at(start).is_none());
        self.regions.insert(start, SharedRegion { start, len, kind });
    }

    pub fn region_at(&self, addr: u64) -> Option<SharedRegion> {
        self.regions
            .range(..=addr)
            .next_back()
            .map(|(_, r)| *r)
            .filter(|r| addr < r.end())
    }

    /// Region that fully contains `[addr, addr+len)`, if any.
    pub fn region_covering(&self, addr: u64, len: u64) -> Option<SharedRegion> {
        self.region_at(addr).filter(|r| r.contains_range(addr, len))
    }

    /// End of the registered run starting at `addr` (adjacent regions merge).
    pub fn registered_run_end(&self, addr: u64) -> Option<u64> {
        let mut r = self.region_at(addr)?;
        loop {
            match self.regions.get(&r.end()) {
                Some(next) => r = *next,
                None => return Some(r.end()),
            }
        }
    }

    pub fn read(&self, addr: u64, len: usize) -> Vec<u8> {
        let mut out = vec![0u8; len];
        let mut done = 0usize;
        while done < len {
            let a = addr + done as u64;
            let (page, off) = (a / PAGE, (a % PAGE) as usize);
            let n = (PAGE as usize - off).min(len - done);
            if let Some(p) = self.pages.get(&page) {
                out[done..done + n].copy_from_slice(&p[off..off + n]);
            }
            done += n;
        }
        out
    }

    pub fn write(&mut self, addr: u64, data: &[u8]) {
        let mut done = 0usize;
        while done < data.len() {
            let a = addr + done as u64;
            let (page, off) = (a / PAGE, (a % PAGE) as usize);
            let n = (PAGE as usize - off).min(data.len() - done);
            let p = self
                .pages
                .entry(page)
                .or_insert_with(|| Box::new([0u8; PAGE as usize]));
            p[off..off + n].copy_from_slice(&data[done..done + n]);
            done += n;
        }
    }

    pub fn regions(&self) -> impl Iterator<Item = &SharedRegion> {
        self.regions.values()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_read_write_across_pages() {
        let mut m = SharedMemory::default();
        m.register(0x1000_0000, 3 * PAGE, RegionKind::Coherent);
        assert_eq!(m.read(0x1000_0ffe, 4), vec![0; 4]);
        m.write(0x1000_0ffe, &[1, 2, 3, 4]);
        assert_eq!(m.read(0x1000_0ffc, 8), vec![0, 0, 1, 2, 3, 4, 0, 0]);
    }

    #[test]
    fn region_lookup() {
        let mut m = SharedMemory::default();
        m.register(0x1000_0000, 128, RegionKind::Coherent);
        m.register(0x1000_0080, 64, RegionKind::Coherent);
        m.register(0x1000_2000, 16, RegionKind::SwiotlbPool);
        assert!(m.region_covering(0x1000_0000, 128).is_some());
        assert!(m.region_covering(0x1000_0070, 32).is_none());
        assert_eq!(m.registered_run_end(0x1000_0010), Some(0x1000_00c0));
        assert!(m.region_at(0x1000_00c0).is_none());
        assert_eq!(m.region_at(0x1000_2000).unwrap().kind, RegionKind::SwiotlbPool);
    }
}
